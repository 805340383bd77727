"""Train a binary MLP briefly, fold thresholds, pack to bits and check the packed path.

The packed model runs on XNOR + popcount over uint64 words and must give
exactly the same binary activations and logits as the float model.

    python3 demos/pack_and_verify.py
"""
import numpy as np

from shiftbnn import binkernel as bk
from shiftbnn import exper
from shiftbnn.cli import load_config

cfg = load_config("configs/mnist_mlp2.conf").replace(epochs=1, train_subset=10000)
rec, model = exper.train_run(cfg, shift=0.5, seed=0)
print(f"trained 1 epoch at shift 0.5: test acc {rec.final_test_acc:.4f}")

packed = bk.export_packed(model)          # folds th into the BN bias first
blob = packed.to_bytes()
n_float = sum(v.nbytes for v in model.state_dict().values())
print(f"packed model {len(blob)} bytes vs float checkpoint tensors {n_float} bytes")

_, test = exper.load_data(cfg)
x = test.images[:2000]
with bk.Timer() as t_ref:
    ref_pred, ref_acts = bk.run_reference_batched(model, x)
with bk.Timer() as t_pk:
    pk_pred, pk_acts = bk.run_batched(bk.PackedModel.from_bytes(blob), x, collect=True)

same = all(np.array_equal(a, b) for a, b in zip(ref_acts, pk_acts))
print(f"activations identical: {same}, predictions identical: {np.array_equal(ref_pred, pk_pred)}")
print(f"float path {t_ref.elapsed:.2f}s, packed path {t_pk.elapsed:.2f}s (numpy, not an optimized kernel)")
