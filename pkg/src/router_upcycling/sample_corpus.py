"""Assemble a multi-domain byte corpus from files already present on the machine.

Five domains: ``code`` (Python standard library sources), ``c_headers`` (system
C/C++ headers), ``legal`` (license and copyright notices), ``docs``
(reStructuredText/Markdown documentation) and ``math`` (generated worked
arithmetic and algebra). File choice is a seeded shuffle of sorted paths, so a
given machine and seed always produce the same corpus.

    python -m router_upcycling.sample_corpus OUT_DIR [--bytes-per-domain N] [--seed S]
"""

from __future__ import annotations

import argparse
import glob
import math
import sys
from fractions import Fraction
from pathlib import Path

from .numeric import make_rng

SOURCES = {
    "code": ["/usr/lib/python3*/**/*.py"],
    "c_headers": ["/usr/include/**/*.h"],
    "legal": ["/usr/share/common-licenses/*", "/usr/share/doc/*/copyright"],
    "docs": ["/usr/share/**/*.rst", "/usr/share/**/*.md", "/usr/lib/python3*/**/*.rst", "/usr/local/lib/python3*/**/*.md"],
}
MAX_FILE_BYTES = 64_000


def _candidates(patterns: list[str]) -> list[str]:
    found: set[str] = set()
    for pat in patterns:
        found.update(glob.glob(pat, recursive=True))
    return sorted(p for p in found if Path(p).is_file())


def _collect(patterns: list[str], budget: int, seed: int) -> str:
    paths = _candidates(patterns)
    order = make_rng(seed).permutation(len(paths))
    parts, used = [], 0
    for i in order:
        try:
            raw = Path(paths[i]).read_bytes()[:MAX_FILE_BYTES]
            text = raw.decode("utf-8")
        except (OSError, UnicodeDecodeError):
            continue
        if not text.strip():
            continue
        parts.append(text)
        used += len(raw)
        if used >= budget:
            break
    return "\n".join(parts)


def _math_text(budget: int, seed: int) -> str:
    rng = make_rng(seed)
    lines: list[str] = []
    size = 0

    def ri(lo, hi):
        return int(rng.integers(lo, hi + 1))

    while size < budget:
        kind = ri(0, 7)
        if kind == 0:
            a, b = ri(2, 999), ri(2, 999)
            line = f"Compute {a} * {b}. Answer: {a * b}."
        elif kind == 1:
            a, x, b = ri(2, 19), ri(-30, 30), ri(-99, 99)
            line = f"Solve {a}x + {b} = {a * x + b} for x. Subtract {b} and divide by {a}: x = {x}."
        elif kind == 2:
            a, b = ri(12, 5000), ri(12, 5000)
            line = f"gcd({a}, {b}) = {math.gcd(a, b)}, lcm({a}, {b}) = {a * b // math.gcd(a, b)}."
        elif kind == 3:
            p, q, r, s = ri(1, 12), ri(2, 12), ri(1, 12), ri(2, 12)
            line = f"{p}/{q} + {r}/{s} = {Fraction(p, q) + Fraction(r, s)}."
        elif kind == 4:
            n, c = ri(2, 7), ri(1, 9)
            line = f"d/dx ({c}x^{n}) = {c * n}x^{n - 1}; the integral of {c * n}x^{n - 1} dx is {c}x^{n} + C."
        elif kind == 5:
            n = ri(3, 60)
            line = f"The sum 1 + 2 + ... + {n} equals n(n+1)/2 = {n * (n + 1) // 2}."
        elif kind == 6:
            r1, r2 = ri(-9, 9), ri(-9, 9)
            b, c = -(r1 + r2), r1 * r2
            line = f"Factor x^2 + ({b})x + ({c}) = (x - ({r1}))(x - ({r2})), so the roots are {r1} and {r2}."
        else:
            n = ri(2, 400)
            fac, m, d = [], n, 2
            while d * d <= m:
                while m % d == 0:
                    fac.append(d)
                    m //= d
                d += 1
            if m > 1:
                fac.append(m)
            line = f"The prime factorization of {n} is {' * '.join(map(str, fac))}."
        lines.append(line)
        size += len(line) + 1
    return "\n".join(lines) + "\n"


def build_sample_corpus(out_dir, bytes_per_domain: int = 1_100_000, seed: int = 0) -> Path:
    out = Path(out_dir)
    for i, (domain, patterns) in enumerate(SOURCES.items()):
        text = _collect(patterns, bytes_per_domain, seed + i)
        if not text:
            continue
        (out / domain).mkdir(parents=True, exist_ok=True)
        (out / domain / "part0.txt").write_text(text, encoding="utf-8")
    (out / "math").mkdir(parents=True, exist_ok=True)
    (out / "math" / "part0.txt").write_text(_math_text(bytes_per_domain, seed + 99), encoding="utf-8")
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("out_dir")
    ap.add_argument("--bytes-per-domain", type=int, default=1_100_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    out = build_sample_corpus(args.out_dir, args.bytes_per_domain, args.seed)
    for d in sorted(out.iterdir()):
        size = sum(f.stat().st_size for f in d.glob("*.txt"))
        print(f"{d.name}\t{size}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
