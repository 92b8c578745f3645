"""Smoke test for the pydfqlab extension.

Build first:  maturin develop --release -m crates/py/Cargo.toml
Then run:     python python/smoke_test.py
"""

import json
import math

import pydfqlab as dq


def check_autodiff():
    a = dq.Tensor([2, 2], [1.0, 2.0, 3.0, 4.0], requires_grad=True)
    b = dq.Tensor([2, 2], [0.5, -1.0, 2.0, 0.0])
    loss = (a @ b).sum()
    loss.backward()
    # d/da sum(a @ b) = row sums of b broadcast over rows
    assert a.grad == [-0.5, 2.0, -0.5, 2.0], a.grad
    assert math.isclose(loss.item(), sum((a @ b).data))

    x = dq.Tensor([4], [-0.6, 0.2, 0.7, 1.4], requires_grad=True)
    x.round_ste().sum().backward()
    assert x.grad == [1.0] * 4


def check_quantizers():
    assert math.isclose(dq.fake_quant_linear(0.26, 0.1, 0, 8), 0.3)
    assert dq.fake_quant_linear(100.0, 0.1, 0, 4) == 1.5
    assert dq.fake_quant_log2(0.25, 1.0, 4) == 0.25
    assert dq.fake_quant_log2(0.0, 1.0, 3) > 0.0


def check_priors_and_targets():
    priors = dq.attention_priors(0, 8, 4, 4)
    assert priors
    for block, head, cls, side, values in priors:
        # blocks and heads are 1-indexed; priors cover the later half
        assert 2 <= block <= 4 and 1 <= head <= 4
        assert len(values) == 64 and side >= 1
        # patch mass plus the class-token share sums to one
        assert math.isclose(sum(values) + cls, 1.0, rel_tol=1e-9)
    t = dq.soft_target(0, [3])
    assert len(t) == 10 and math.isclose(sum(t), 1.0, rel_tol=1e-9)
    assert max(range(10), key=lambda i: t[i]) == 3


def check_pipeline_pieces():
    tr, tr_labels, te, te_labels = dq.toy_dataset(0, 20, 20)
    assert len(tr) == 20 * 3 * 32 * 32 and len(te_labels) == 20

    cfg = json.dumps({"num_blocks": 2, "embed_dim": 16, "num_heads": 2})
    model = dq.ViTModel(cfg, seed=1)
    images = [(p / 255.0 - 0.5) / 0.5 for p in te[: 4 * 3 * 32 * 32]]
    preds = model.predict(images)
    assert len(preds) == 4 and all(0 <= p < 10 for p in preds)

    synth_cfg = json.dumps({"batch_size": 2, "iterations": 2})
    pixels, labels, manifest = dq.synthesize(model, "sardfq", synth_cfg)
    assert len(pixels) == 2 * 3 * 32 * 32 and len(labels) == 2
    json.loads(manifest)

    calib = [(p - 0.5) / 0.5 for p in pixels]
    q, report = dq.quantize(model, calib, 4, 4, json.dumps({"iterations": 2}))
    assert (q.wbits, q.abits) == (4, 4)
    json.loads(report)
    json.loads(q.sites())
    assert len(q.predict(images)) == 4


if __name__ == "__main__":
    check_autodiff()
    check_quantizers()
    check_priors_and_targets()
    check_pipeline_pieces()
    print("pydfqlab smoke test ok")
