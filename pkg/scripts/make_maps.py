"""Regenerate the bundled maps (src/krrl/data/fig4.map and fig4_50.map).

The layout is drawn as rectangles on a 30x30 design grid and scaled for the
50x50 variant. Topology:

* shop on the west spine; room4 next to it (no blocking area on the way)
* room1 behind blocking area a (spine, south part)
* room2 on a branch behind b, reached either through a or around the loop
* room5 on a dead-end branch behind c (deepest blocking area)
* room3 on the east spine: short route through d, a southern route
  through a, and a long northern route with no blocking area
"""
import argparse
from pathlib import Path

# (row0, row1, col0, col1, char), inclusive, on the 30x30 design grid
RECTS = [
    (1, 17, 1, 3, "."),     # west spine, north part
    (1, 3, 4, 27, "."),     # northern corridor (no blocking area)
    (1, 28, 25, 27, "."),   # east spine
    (12, 14, 4, 24, "."),   # middle corridor
    (12, 14, 20, 21, "d"),
    (9, 11, 4, 6, "4"),
    (18, 19, 1, 3, "a"),
    (20, 28, 1, 3, "."),    # west spine, south part
    (18, 19, 4, 6, "1"),   # entered only from a
    (26, 28, 4, 24, "."),   # southern corridor
    (21, 22, 9, 11, "."),   # room2 branch
    (23, 25, 9, 11, "b"),
    (17, 20, 8, 12, "2"),
    (15, 21, 15, 17, "c"),  # room5 branch
    (22, 24, 14, 18, "5"),
    (22, 26, 28, 28, "3"),
]
SHOP = (13, 2)

BR_TABLE = {
    # merge settings: heavy blocking on d, on a, or on both
    "morning": {"a": 1.0, "b": 0.1, "c": 0.1, "d": 0.1},
    "noon": {"a": 0.1, "b": 0.1, "c": 0.1, "d": 1.0},
    "afternoon": {"a": 1.0, "b": 0.1, "c": 0.1, "d": 1.0},
}


def scaled(v0, v1, f):
    return round(v0 * f), max(round(v0 * f), round((v1 + 1) * f) - 1)


def draw(size):
    f = size / 30
    grid = [["#"] * size for _ in range(size)]
    for r0, r1, c0, c1, ch in RECTS:
        a0, a1 = scaled(r0, r1, f)
        b0, b1 = scaled(c0, c1, f)
        for r in range(a0, a1 + 1):
            for c in range(b0, b1 + 1):
                grid[r][c] = ch
    grid[round(SHOP[0] * f)][round(SHOP[1] * f)] = "S"
    for r in range(size):
        grid[r][0] = grid[r][size - 1] = "#"
    grid[0] = ["#"] * size
    grid[size - 1] = ["#"] * size
    lines = [f"br {a} {t} {v}" for t, tab in BR_TABLE.items() for a, v in tab.items()]
    return "\n".join(lines + ["".join(row) for row in grid]) + "\n"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "src/krrl/data"))
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fig4.map").write_text(draw(30))
    (out / "fig4_50.map").write_text(draw(50))


if __name__ == "__main__":
    main()
