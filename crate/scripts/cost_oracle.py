#!/usr/bin/env python3
"""Evaluates the cost formulas with exact rational arithmetic, independently
of the Rust code, and checks them against the reference values the test
suite asserts. Exit status 1 on any mismatch."""

import math
import sys
from fractions import Fraction as F


def memory_tokens(r):
    return math.ceil(F(37, 2) * r)


def flops_no_kv(n, h, l, v):
    return l * (23 * n * h**2 + 4 * n**2 * h) + 2 * h * v


def flops_kv_step(n, h, l, v):
    return l * (23 * h**2 + 4 * n * h) + 2 * h * v


def hypernet_amortized(c, r, h, l, lp):
    m = memory_tokens(r)
    f1 = l * (23 * (c + m) * h**2 + 4 * (c + m) ** 2 * h)
    f2 = F(1, 2) * lp * m * (20 * l * h**2 + 4 * l**2 * h) + F(1, 2) * lp * l * (20 * m * h**2 + 4 * m**2 * h)
    assert f2.denominator == 1
    return f1, int(f2), f1 + int(f2)


def sft_amortized(c, t, h, l, v):
    return 3 * t * (l * (23 * c * h**2 + 4 * c**2 * h) + 2 * c * h * v)


def peak(n, h, l):
    return 4 * l * n * h, 4 * l * n * h + l * n * n, F(1, 2) * l * n * h


checks = [
    ("memory_tokens(8)", memory_tokens(8), 148),
    ("memory_tokens(2)", memory_tokens(2), 37),
    ("flops_no_kv(10,64,4,256)", flops_no_kv(10, 64, 4, 256), 3_903_488),
    ("flops_kv_step(10,64,4,256)", flops_kv_step(10, 64, 4, 256), 419_840),
    ("flops_kv_step(60,64,4,256)", flops_kv_step(60, 64, 4, 256), 471_040),
    ("hypernet FLOPs1(C=50,r=2,H=64,L=4,L'=2)", hypernet_amortized(50, 2, 64, 4, 2)[0], 40_535_040),
    ("hypernet FLOPs2", hypernet_amortized(50, 2, 64, 4, 2)[1], 25_801_728),
    ("hypernet total", hypernet_amortized(50, 2, 64, 4, 2)[2], 66_336_768),
    ("sft_amortized(50,10,64,4,256)", sft_amortized(50, 10, 64, 4, 256), 691_200_000),
    ("peak efficient(60,64,4)", peak(60, 64, 4)[0], 61_440),
    ("peak standard(60,64,4)", peak(60, 64, 4)[1], 75_840),
    ("peak kv cache(60,64,4)", peak(60, 64, 4)[2], 7_680),
    ("axial ratio L=36 M=148", F(36 + 148, 2 * 36 * 148), F(23, 1332)),
]

failed = 0
for name, got, want in checks:
    ok = got == want
    failed += not ok
    print(f"{'ok  ' if ok else 'FAIL'} {name} = {got} (expected {want})")

for r in range(1, 17):
    if memory_tokens(r) * 2 < 37 * r:
        print(f"FAIL memory_tokens({r}) too small")
        failed += 1

sys.exit(1 if failed else 0)
