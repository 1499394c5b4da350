#!/usr/bin/env python3
"""Convert the raw Cora citation files into the dataset directory format.

Input is the classic two-file distribution:

  cora.content   <paper_id> <1433 binary word indicators> <class_name>
  cora.cites     <cited_paper_id> <citing_paper_id>

Node order follows cora.content file order; class names map to ids in
sorted order. Citations become undirected edges (deduplicated), which yields
2708 nodes, 5278 undirected edges, 1433 features, and 7 classes. No
splits.json is written: the loader generates the standard 20-per-class /
500 / 1000 splits, and experiment code draws seeded splits itself.

Usage:
  python scripts/prepare_cora.py --content cora.content --cites cora.cites \
      --out data/cora
"""

import argparse
from pathlib import Path


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--content", required=True, help="path to cora.content")
    ap.add_argument("--cites", required=True, help="path to cora.cites")
    ap.add_argument("--out", required=True, help="output dataset directory")
    args = ap.parse_args()

    ids = []
    feature_rows = []
    class_names = []
    with open(args.content) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            ids.append(parts[0])
            feature_rows.append(parts[1:-1])
            class_names.append(parts[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    classes = {name: i for i, name in enumerate(sorted(set(class_names)))}

    pairs = set()
    with open(args.cites) as f:
        for line in f:
            parts = line.split()
            if len(parts) != 2:
                continue
            a, b = index[parts[0]], index[parts[1]]
            if a != b:
                pairs.add((min(a, b), max(a, b)))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "features.csv", "w") as f:
        for row in feature_rows:
            f.write(",".join(row) + "\n")
    with open(out / "edges.csv", "w") as f:
        for a, b in sorted(pairs):
            f.write(f"{a},{b}\n")
    with open(out / "labels.csv", "w") as f:
        for name in class_names:
            f.write(f"{classes[name]}\n")
    print(
        f"wrote {len(ids)} nodes, {len(pairs)} undirected edges, "
        f"{len(feature_rows[0])} features, {len(classes)} classes -> {out}"
    )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
