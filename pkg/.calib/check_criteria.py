"""Calibration helper: evaluate the trend criteria on an experiment dir."""

import sys
from collections import defaultdict

sys.path.insert(0, "src")
from ewclab.harness import MetricRow, CSV_HEADER

path = sys.argv[1] if len(sys.argv) > 1 else ".calib/exp1/curves.csv"
lines = open(path).read().splitlines()
assert lines[0] == CSV_HEADER
rows = [MetricRow.from_csv_line(l) for l in lines[1:]]

# final full-image mean dice per (regime, lam, seed, task)
full = defaultdict(list)
for r in rows:
    if r.scope == "full":
        full[(r.regime, r.lam, r.seed, r.task)].append(r.dice)
cell = {k: sum(v) / len(v) for k, v in full.items()}

def seed_means(regime, lam, task):
    vals = [v for (rg, lm, sd, tk), v in cell.items() if (rg, lm, tk) == (regime, lam, task)]
    return vals

def mean(vals):
    return sum(vals) / len(vals)

dm_a = mean(seed_means("dm-a", 0.0, "a"))
dm_b = mean(seed_means("dm-b", 0.0, "b"))
ft_a = seed_means("finetune", 0.0, "a")
ft_b = seed_means("finetune", 0.0, "b")
print(f"DM-A level: {dm_a:.3f}   DM-B level: {dm_b:.3f}")
print(f"finetune A per seed: {[round(v,3) for v in ft_a]} mean {mean(ft_a):.3f}  drop {dm_a-mean(ft_a):.3f}")
print(f"finetune B per seed: {[round(v,3) for v in ft_b]} mean {mean(ft_b):.3f}")
print(f"C5 forgetting >= 0.30: {'PASS' if dm_a - mean(ft_a) >= 0.30 else 'FAIL'}")

mt_a = seed_means("multitask", 0.0, "a")
mt_b = seed_means("multitask", 0.0, "b")
if mt_a:
    print(f"multitask A {mean(mt_a):.3f} (DM-A {dm_a:.3f}) B {mean(mt_b):.3f} (DM-B {dm_b:.3f})")
    ok9 = mean(mt_a) >= dm_a - 0.05 and mean(mt_b) >= dm_b - 0.05
    print(f"C9 multitask upper bound: {'PASS' if ok9 else 'FAIL'}")

for regime in ("l2", "ewc"):
    lams = sorted({lm for (rg, lm, sd, tk) in cell if rg == regime})
    a_curve = [mean(seed_means(regime, lm, "a")) for lm in lams]
    b_curve = [mean(seed_means(regime, lm, "b")) for lm in lams]
    inv_a = sum(1 for i in range(len(a_curve) - 1) if a_curve[i + 1] < a_curve[i])
    inv_b = sum(1 for i in range(len(b_curve) - 1) if b_curve[i + 1] > b_curve[i])
    print(f"{regime}: lams {lams}")
    print(f"  A curve {[round(v,3) for v in a_curve]} inversions {inv_a}")
    print(f"  B curve {[round(v,3) for v in b_curve]} inversions {inv_b}")
    print(f"  C8 monotone (<=1 each): {'PASS' if inv_a <= 1 and inv_b <= 1 else 'FAIL'}")

# C6: exists ewc lambda with A >= dm_a - 0.10 and B >= 0.8 * finetune B
ok6 = []
for lm in sorted({lm for (rg, lm, sd, tk) in cell if rg == "ewc"}):
    a = mean(seed_means("ewc", lm, "a"))
    b = mean(seed_means("ewc", lm, "b"))
    good = a >= dm_a - 0.10 and b >= 0.8 * mean(ft_b)
    ok6.append(good)
    print(f"ewc lam={lm:g}: A={a:.3f} (bar {dm_a-0.10:.3f}) B={b:.3f} (bar {0.8*mean(ft_b):.3f}) {'OK' if good else '--'}")
print(f"C6 mitigation: {'PASS' if any(ok6) else 'FAIL'}")

# C7: closest-B pair within 0.05, EWC A >= L2 A (1 seed inversion tolerated)
l2_lams = sorted({lm for (rg, lm, sd, tk) in cell if rg == "l2"})
ewc_lams = sorted({lm for (rg, lm, sd, tk) in cell if rg == "ewc"})
best = None
for l_lm in l2_lams:
    for e_lm in ewc_lams:
        diff = abs(mean(seed_means("l2", l_lm, "b")) - mean(seed_means("ewc", e_lm, "b")))
        if best is None or diff < best[0]:
            best = (diff, l_lm, e_lm)
diff, l_lm, e_lm = best
l2a, ewca = seed_means("l2", l_lm, "a"), seed_means("ewc", e_lm, "a")
print(f"C7 pair: l2 lam={l_lm:g} (B={mean(seed_means('l2', l_lm, 'b')):.3f}, A={mean(l2a):.3f}) vs "
      f"ewc lam={e_lm:g} (B={mean(seed_means('ewc', e_lm, 'b')):.3f}, A={mean(ewca):.3f}), dB={diff:.3f}")
inversions = sum(1 for x, y in zip(ewca, l2a) if x < y)
ok7 = diff <= 0.05 and mean(ewca) >= mean(l2a) and inversions <= 1
print(f"  per-seed ewc A {[round(v,3) for v in ewca]} vs l2 A {[round(v,3) for v in l2a]} inversions {inversions}")
print(f"C7 ewc >= l2 at matched B: {'PASS' if ok7 else 'FAIL'}")
