"""Synthetic invocation traces and length datasets for runs without real traces.

    python -m meshsim.fake_trace --out-dir data --functions 32 --rate 0.5
"""

from __future__ import annotations

import argparse
import csv
import os
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import DEFAULT_SEED, TRACE_WINDOW_SECONDS

BURST_SECONDS = 5.0


def function_ids(count: int) -> List[str]:
    return [f"fn-{i:03d}" for i in range(count)]


def generate_invocations(
    functions: int = 32,
    window: float = TRACE_WINDOW_SECONDS,
    mean_rate: float = 0.5,
    bursts: int = 0,
    burst_size: int = 20,
    seed: int = DEFAULT_SEED,
) -> List[Tuple[float, str]]:
    """Poisson arrivals per function with heavy-tailed (log-normal) rates.

    `mean_rate` is requests per second per function on average. `bursts` adds
    that many spikes of `burst_size` arrivals packed into a few seconds.
    """
    if functions < 1 or window <= 0 or mean_rate < 0:
        raise ValueError("functions >= 1, window > 0 and mean_rate >= 0 are required")
    rng = np.random.default_rng(seed)
    names = function_ids(functions)
    rates = rng.lognormal(mean=0.0, sigma=1.0, size=functions)
    rates *= mean_rate / rates.mean()
    rows: List[Tuple[float, str]] = []
    for fn, rate in zip(names, rates):
        n = int(rng.poisson(rate * window))
        rows.extend((float(t), fn) for t in rng.uniform(0.0, window, size=n))
    for _ in range(bursts):
        fn = names[int(rng.integers(functions))]
        start = float(rng.uniform(0.0, max(window - BURST_SECONDS, 0.0)))
        rows.extend((float(t), fn) for t in start + rng.uniform(0.0, BURST_SECONDS, size=burst_size))
    return sorted(((round(t, 6), fn) for t, fn in rows if t < window), key=lambda r: (r[0], r[1]))


def generate_lengths(
    count: int = 1000,
    max_seq_len: int = 4096,
    input_median: float = 256.0,
    output_median: float = 192.0,
    sigma: float = 0.9,
    seed: int = DEFAULT_SEED,
) -> List[Tuple[int, int]]:
    """Conversation-like (input, output) token pairs, log-normal in both."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    inputs = np.clip(np.rint(rng.lognormal(np.log(input_median), sigma, size=count)), 1, max_seq_len - 1)
    outputs = np.clip(np.rint(rng.lognormal(np.log(output_median), sigma, size=count)), 1, None)
    outputs = np.minimum(outputs, max_seq_len - inputs)
    return [(int(i), int(o)) for i, o in zip(inputs, outputs)]


def flatten_minute_counts(counts: Mapping[str, Sequence[int]]) -> List[Tuple[float, str]]:
    """Spread per-minute invocation counts uniformly inside each minute.

    Count c in minute m becomes timestamps 60*m + (i + 0.5) * 60 / c.
    """
    rows: List[Tuple[float, str]] = []
    for fn in sorted(counts):
        for minute, c in enumerate(counts[fn]):
            c = int(c)
            if c < 0:
                raise ValueError(f"negative count for {fn} minute {minute}")
            step = 60.0 / c if c else 0.0
            rows.extend((round(60.0 * minute + (i + 0.5) * step, 6), fn) for i in range(c))
    return sorted(rows, key=lambda r: (r[0], r[1]))


def write_invocations_csv(rows: Sequence[Tuple[float, str]], path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["timestamp_s", "function_id"])
        for ts, fn in rows:
            w.writerow([f"{ts:.6f}", fn])


def write_lengths_csv(pairs: Sequence[Tuple[int, int]], path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["input_tokens", "output_tokens"])
        w.writerows(pairs)


def main(argv: Optional[Sequence[str]] = None) -> None:
    parser = argparse.ArgumentParser(description="Write a synthetic invocation trace and length dataset.")
    parser.add_argument("--out-dir", default="data", help="Directory for trace.csv and lengths.csv")
    parser.add_argument("--functions", type=int, default=32)
    parser.add_argument("--window", type=float, default=TRACE_WINDOW_SECONDS)
    parser.add_argument("--rate", type=float, default=0.5, help="Mean requests per second per function")
    parser.add_argument("--bursts", type=int, default=0)
    parser.add_argument("--lengths", type=int, default=1000, help="Number of length pairs")
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED)
    args = parser.parse_args(argv)

    rows = generate_invocations(args.functions, args.window, args.rate, args.bursts, seed=args.seed)
    pairs = generate_lengths(args.lengths, seed=args.seed)
    trace_path = os.path.join(args.out_dir, "trace.csv")
    lengths_path = os.path.join(args.out_dir, "lengths.csv")
    write_invocations_csv(rows, trace_path)
    write_lengths_csv(pairs, lengths_path)
    per_fn: Dict[str, int] = {}
    for _ts, fn in rows:
        per_fn[fn] = per_fn.get(fn, 0) + 1
    print(f"[meshsim] trace={trace_path} invocations={len(rows)} functions={len(per_fn)}")
    print(f"[meshsim] lengths={lengths_path} pairs={len(pairs)}")


if __name__ == "__main__":
    main()
