"""How much does SND move when the target is halved, as a function of N?

For identical features SND is exactly ln(N - 1), so halving the target shifts
it by about ln 2 and the relative shift is about ln 2 / ln N. Trained-model
predictions follow the same law. Prints one row per N for three fixtures:
identical rows, random softmax rows, and the source-only toy model.
"""

import math

import numpy as np
from scipy.special import softmax

from nbrselect.snd import l2_normalize, snd
from nbrselect.toy.data import ToyConfig
from nbrselect.toy.lab import train_toy


def half_shift(rows: np.ndarray, draws: int, rng) -> float:
    full = snd(l2_normalize(rows)).value
    n = rows.shape[0]
    dev = []
    for _ in range(draws):
        idx = np.sort(rng.choice(n, size=n // 2, replace=False))
        dev.append(abs(snd(l2_normalize(rows[idx])).value - full) / full)
    return max(dev)


def main():
    rng = np.random.default_rng(0)
    toy = train_toy(ToyConfig(n_per_class=4000, lambda_adv=0.0)).target_probs.rows
    print(f"{'N':>6}  {'ln2/ln(N-1)':>11}  {'identical':>9}  {'random':>9}  {'toy':>9}")
    for n in (250, 500, 1000, 2000, 4000):
        identical = math.log((n - 1) / (n // 2 - 1)) / math.log(n - 1)
        rand = softmax(3 * rng.normal(size=(n, 10)), axis=1)
        sub = toy[np.sort(rng.choice(len(toy), size=n, replace=False))]
        print(
            f"{n:>6}  {math.log(2) / math.log(n - 1):>11.3f}  {identical:>9.3f}"
            f"  {half_shift(rand, 10, rng):>9.3f}  {half_shift(sub, 10, rng):>9.3f}"
        )


if __name__ == "__main__":
    main()
