"""Writes the 100-row panel fixture inputs and the expected panel.

The expected panel is computed here, independently of the C++ join code,
directly from the rules used to generate the inputs.
"""
import os

HERE = os.path.dirname(os.path.abspath(__file__))
TOWNS = [f"T{t:02d}" for t in range(1, 11)]
YEARS = list(range(2001, 2011))


def g(x):
    return "0" if x == 0 else "%.9g" % x


def cents(c):
    return f"{c // 100}.{c % 100:02d}"


def exposure(t, y):
    return 0 if (t == 3 and y == 2004) else 100 * t + 10 * (y - 2001)


def claims(t, y):
    if exposure(t, y) == 0 or (t + y) % 3 != 0:
        return None
    n = (t + y) % 5
    return n, n * 123450


def indices(t, y):
    k = y - 2001
    return (-(t % 4) * 0.25 - k * 0.125, -(t % 3) * 0.5 + k * 0.0625, (t % 5) * 0.375 + k * 0.03125)


def clay(t):
    return 5.0 * t + 0.5


def requests(t):
    if t % 2 == 1:
        return [2000 + t, 2000 + t + 3]
    if t == 4:
        return [1995]
    return []


with open(os.path.join(HERE, "fixture_exposure.csv"), "w") as f:
    f.write("town_id,year,exposure,sums_insured\n")
    for t, town in enumerate(TOWNS, 1):
        for y in YEARS:
            f.write(f"{town},{y},{exposure(t, y)},{cents(exposure(t, y) * 15000000)}\n")

with open(os.path.join(HERE, "fixture_claims.csv"), "w") as f:
    f.write("town_id,year,claims,cost\n")
    for t, town in enumerate(TOWNS, 1):
        for y in YEARS:
            c = claims(t, y)
            if c is not None:
                f.write(f"{town},{y},{c[0]},{cents(c[1])}\n")

with open(os.path.join(HERE, "fixture_indices.csv"), "w") as f:
    f.write("town_id,year,espi,esswi,essti\n")
    for t, town in enumerate(TOWNS, 1):
        for y in YEARS:
            a, b, c = indices(t, y)
            f.write(f"{town},{y},{g(a)},{g(b)},{g(c)}\n")

with open(os.path.join(HERE, "fixture_clay.csv"), "w") as f:
    f.write("town_id,clay\n")
    for t, town in enumerate(TOWNS, 1):
        f.write(f"{town},{g(clay(t))}\n")

with open(os.path.join(HERE, "fixture_cat_history.csv"), "w") as f:
    f.write("town_id,year\n")
    for t, town in enumerate(TOWNS, 1):
        for r in requests(t):
            f.write(f"{town},{r}\n")

with open(os.path.join(HERE, "fixture_panel_golden.csv"), "w") as f:
    f.write("town_id,year,exposure,claims,cost,sums_insured,espi,esswi,essti,clay,cat\n")
    for t, town in enumerate(TOWNS, 1):
        for y in YEARS:
            c = claims(t, y) or (0, 0)
            a, b, s = indices(t, y)
            cat = 1 if any(r < y for r in requests(t)) else 0
            e = exposure(t, y)
            f.write(f"{town},{y},{e},{c[0]},{cents(c[1])},{cents(e * 15000000)},{g(a)},{g(b)},{g(s)},{g(clay(t))},{cat}\n")
