"""Brute-force reference implementations, written independently of the package."""

import math


def all_oracle(times, duration):
    U = len(times)
    total = 0.0
    for i in range(1, U + 1):
        total += times[i - 1] - i * duration / U
    return total / U


def al_oracle(times, duration, target_len):
    gamma = target_len / duration
    tau = len(times)
    for i in range(1, len(times) + 1):
        if times[i - 1] >= duration:
            tau = i
            break
    total = 0.0
    for i in range(1, tau + 1):
        total += times[i - 1] - (i - 1) / gamma
    return total / tau


def laal_oracle(times, duration, hyp_len, ref_len):
    return al_oracle(times, duration, max(hyp_len, ref_len))


def edit_distance_oracle(a, b):
    # plain recursion with memo
    memo = {}

    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        if (i, j) not in memo:
            memo[i, j] = min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))
        return memo[i, j]

    return d(len(a), len(b))


def rel_close(a, b, tol):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b)) or math.isclose(a, b, rel_tol=tol)
