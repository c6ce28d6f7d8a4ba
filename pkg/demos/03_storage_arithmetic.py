"""Storage of quantized GPT-2 sized layers, computed from shapes alone."""

from bcqtune import qfile
from bcqtune import toymodel as tm
from bcqtune.bcq import ROW

geo = qfile.GPT2_MEDIUM
h = geo.h

# %% one block, row-wise groups, q = 1, 2, 3 (MB = 10**6 bytes, word padding excluded)
print(f"{'layer':<12}{'q=1':>8}{'q=2':>8}{'q=3':>8}")
for name, (h_out, h_in) in tm.layer_shapes(h).items():
    cells = [qfile.layer_size(name, h_out, h_in, q, ROW).total_mb for q in (1, 2, 3)]
    print(f"{name:<12}" + "".join(f"{c:8.2f}" for c in cells))

# %% the last FFN layer with different group sizes: smaller groups cost more scales
for g in (4 * h, h, h // 2):
    cells = [qfile.layer_size("ffn_4h_h", h, 4 * h, q, g).total_mb for q in (1, 2, 3)]
    print(f"{'g=' + str(g):<12}" + "".join(f"{c:8.3f}" for c in cells))

# %% compression ratio against float32 approaches 32/q
for q in (1, 2, 3):
    s = qfile.layer_size("att_qkv", 3 * h, h, q, ROW)
    print(f"q={q}: ratio {s.fp32_bytes / s.total_bytes:.2f} (ideal {32 / q:.2f})")

# %% whole files and trainable counts
for label, g, planes in [("alpha_1, row-wise", ROW, (1,)), ("alpha_1, g=1024", 1024, (1,)),
                         ("all planes, row-wise", ROW, (1, 2, 3))]:
    n = tm.count_trainable_geometry(h, geo.n_layers, g, planes)
    print(f"{label:<22} trainable {n:>8,}  checkpoint {qfile.checkpoint_file_size(geo, g, planes) / 1e6:.2f} MB")
for q in (3, 2, 1):
    print(f"base file q={q}: {qfile.model_file_size(geo, q) / 1e6:.1f} MB")
