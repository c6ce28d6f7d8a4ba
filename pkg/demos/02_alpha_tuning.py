"""Quantize a small transformer, then train only the first scale plane.

The task is sequence reversal: the model reads six symbols and a separator and
has to write the symbols back in reverse order.
"""

import tempfile
from pathlib import Path

from bcqtune import qfile
from bcqtune import toymodel as tm
from bcqtune.alphatune import TrainConfig, evaluate, train
from bcqtune.bcq import QuantConfig
from bcqtune.tasks import make_reversal, reversal_vocab

cfg = tm.ModelConfig(vocab=reversal_vocab(), h=32, n_layers=2, n_ctx=12)
dense = tm.init_dense(cfg, seed=0)
train_data = make_reversal(2000, k=6, seed=1)
valid_data = make_reversal(500, k=6, seed=2)

# %% post-training quantization: 3 bit planes per linear layer, one scale per row
model = tm.quantize_model(dense, QuantConfig(q=3))
print("trainable scales (alpha_1 only):", tm.count_trainable(model))
loss, acc = evaluate(model, valid_data)
print(f"before tuning: loss {loss:.3f}  token accuracy {acc:.1%}")

# %% scale-only training; bit planes, biases, norms and embeddings stay frozen
frozen = tm.frozen_digest(model)
model, history = train(model, train_data, TrainConfig(lr=1e-2, epochs=5), valid_data)
for row in history:
    print(f"epoch {row['epoch']}  train {row['train_loss']:.3f}  valid {row['valid_loss']:.3f}")
loss, acc = evaluate(model, valid_data)
print(f"after tuning: loss {loss:.3f}  token accuracy {acc:.1%}")
print("frozen tensors untouched:", tm.frozen_digest(model) == frozen)

# %% deployment: one shared base file plus a tiny checkpoint per task
with tempfile.TemporaryDirectory() as tmp:
    base = tm.quantize_model(dense, QuantConfig(q=3))
    qfile.save_model(Path(tmp) / "base.bcq", base)
    qfile.save_checkpoint(Path(tmp) / "reversal.ckpt", model)
    sizes = {p.name: p.stat().st_size for p in Path(tmp).iterdir()}
    print(sizes)
    restored = qfile.apply_checkpoint(qfile.load_model(Path(tmp) / "base.bcq"), Path(tmp) / "reversal.ckpt")
    print("restored accuracy", f"{evaluate(restored, valid_data)[1]:.1%}")
