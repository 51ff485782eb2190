#!/usr/bin/env python3
"""Verification metrics: EER and minDCF, their oracles and invariances.

Run:  python3 demos/05_verification.py
"""

import numpy as np

from nvl.evaluation import ScoreSet, Trial, eer, min_dcf


def score_set(target, nontarget):
    trials = ([Trial(f"e{i}", f"t{i}", "target") for i in range(len(target))]
              + [Trial(f"e{i}", f"n{i}", "nontarget") for i in range(len(nontarget))])
    return ScoreSet(trials, np.concatenate([target, nontarget]))


print("== hand-checkable operating points ==")
s = score_set([0.9, 0.8, 0.7], [0.75, 0.3, 0.2])
print(f"targets 0.9/0.8/0.7 vs nontargets 0.75/0.3/0.2 -> EER {eer(s):.4f} (= 1/3)")
print(f"minDCF at prior 0.05: {min_dcf(s, 0.05):.4f}")

perfect = score_set([0.9, 0.8], [0.2, 0.1])
print(f"perfectly separated -> EER {eer(perfect)}, minDCF {min_dcf(perfect, 0.05)}")

overlap = score_set([0.1, 0.5, 0.9], [0.1, 0.5, 0.9])
print(f"identical score multisets -> EER {eer(overlap):.4f} (= 0.5)")

print("\n== brute-force oracle agreement ==")
rng = np.random.default_rng(0)
target = rng.standard_normal(400) + 1.0
nontarget = rng.standard_normal(600)
s = score_set(target, nontarget)


def brute_force(target, nontarget, p):
    scores = np.unique(np.concatenate([target, nontarget]))
    cands = np.concatenate([[scores[0] - 1], (scores[:-1] + scores[1:]) / 2,
                            [scores[-1] + 1]])
    miss = np.array([np.mean(target < t) for t in cands])
    fa = np.array([np.mean(nontarget >= t) for t in cands])
    diff = miss - fa
    j = int(np.flatnonzero(diff >= 0)[0])
    gamma = -diff[j - 1] / (diff[j] - diff[j - 1])
    oracle_eer = miss[j - 1] + gamma * (miss[j] - miss[j - 1])
    costs = (p * miss + (1 - p) * fa) / min(p, 1 - p)
    return oracle_eer, float(np.min(costs))


oracle_eer, oracle_dcf = brute_force(target, nontarget, 0.05)
print(f"fast EER    {eer(s):.10f}  oracle {oracle_eer:.10f}  "
      f"equal: {eer(s) == oracle_eer}")
print(f"fast minDCF {min_dcf(s, 0.05):.10f}  oracle {oracle_dcf:.10f}  "
      f"equal: {min_dcf(s, 0.05) == oracle_dcf}")

print("\n== invariance under strictly monotone score transforms ==")
for name, f in (("affine 3x+2", lambda x: 3 * x + 2), ("tanh", np.tanh),
                ("cube", lambda x: x**3)):
    transformed = score_set(f(target), f(nontarget))
    print(f"{name:12s} EER unchanged: {abs(eer(transformed) - eer(s)) < 1e-12}, "
          f"minDCF unchanged: {abs(min_dcf(transformed, 0.05) - min_dcf(s, 0.05)) < 1e-12}")
