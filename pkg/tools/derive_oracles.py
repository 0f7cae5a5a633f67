"""Closed-form reference values for the test suite, computed in 30-digit arithmetic.

Run once; the printed values are frozen in tests/oracles.py.  Nothing here
imports the package.
"""

import mpmath as mp

mp.mp.dps = 30

c, k = mp.mpf("0.2"), mp.mpf(1)
zeta_w = c / 2
wd = mp.sqrt(k - zeta_w**2)


def q(t):
    return mp.e ** (-zeta_w * t) * (mp.cos(wd * t) + zeta_w / wd * mp.sin(wd * t))


def qdot(t):
    return -(k / wd) * mp.e ** (-zeta_w * t) * mp.sin(wd * t)


def H(t):
    return qdot(t) ** 2 / 2 + k * q(t) ** 2 / 2


t_half = mp.pi / wd
t_star = mp.findroot(lambda t: q(t) - mp.mpf("0.5"), (mp.mpf("0.5"), mp.mpf("1.5")), solver="anderson")
G_half = c * qdot(t_star)

values = {
    "OMEGA_D": wd,
    "Q_AT_10": q(10),
    "P_AT_10": qdot(10),
    "H_AT_10": H(10),
    "W_AT_10": H(0) - H(10),
    "TURNING_TIMES_3": [j * t_half for j in (1, 2, 3)],
    "FIRST_SEGMENT_Q_MIN": q(t_half),
    "T_AT_Q_HALF": t_star,
    "G_AT_Q_HALF": G_half,
    "KTILDE_AT_Q_HALF": G_half / mp.mpf("0.5"),
    "DET_C02_T5": mp.e ** (-1),
    "DET_TR04_T10": mp.e ** (-4),
    "DET_TR02_T10": mp.e ** (-2),
    "HAT_H0": k / 2,
    "UNDAMPED_ACTION_PERIOD": mp.quad(lambda t: mp.sin(t) ** 2 / 2 - mp.cos(t) ** 2 / 2, [0, 2 * mp.pi]),
}

for name, v in values.items():
    if isinstance(v, list):
        print(f"{name} = ({', '.join(mp.nstr(x, 20) for x in v)})")
    else:
        print(f"{name} = {mp.nstr(v, 20)}")
