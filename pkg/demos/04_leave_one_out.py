"""
Does a held-out reward improve anyway?
======================================

Each term is dropped from the objective in turn while the rest are
optimized. Because the toy rewards share pooled image features, the
held-out term usually improves as a side effect. The same study is
available from the command line as ``reno loo``.
"""

from pathlib import Path

from reno.harness import load_config, run_leave_one_out

cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "default.ini")
result = run_leave_one_out(cfg, cfg.criterion.names, n_seeds=10)

print(f"{'held out':<17} {'initial':>9} {'final':>9} {'change':>9} {'improve %':>10}")
for _, term, initial, final, change, pct in result.table():
    print(f"{term:<17} {initial:9.4f} {final:9.4f} {change:+9.4f} {pct:10.1f}")
