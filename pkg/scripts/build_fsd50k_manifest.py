#!/usr/bin/env python3
"""
Build a fedsim clip manifest from the FSD50K development set.

Joins the ground-truth table (FSD50K.ground_truth/dev.csv: fname, labels,
mids, split) with the clip metadata (FSD50K.metadata/dev_clips_info_FSD50K.json,
which carries the Freesound uploader of every clip).
"""
import argparse
import json
import sys
from pathlib import Path

import pandas as pd
from loguru import logger

from fedsim.data import LABEL_SEPARATOR, ClipRecord, write_manifest
from fedsim.errors import MetadataError


def build_manifest(ground_truth: Path, clips_info: Path, out: Path) -> int:
    """
    Write the joined manifest.

    Returns:
        Number of clips written
    """
    df = pd.read_csv(ground_truth, dtype=str, keep_default_na=False)
    with open(clips_info, encoding="utf-8") as fh:
        info = json.load(fh)

    records = []
    for index, row in enumerate(df.itertuples(index=False)):
        meta = info.get(row.fname)
        if meta is None or not meta.get("uploader"):
            raise MetadataError(f"clip {row.fname} has no uploader in {clips_info}", row=index + 2)
        labels = [name.strip() for name in row.labels.split(",") if name.strip()]
        if any(LABEL_SEPARATOR in name for name in labels):
            raise MetadataError(f"label contains {LABEL_SEPARATOR!r}", row=index + 2)
        records.append(
            ClipRecord(
                clip_id=row.fname,
                uploader=meta["uploader"],
                labels=frozenset(labels),
                split=row.split,
            )
        )
    write_manifest(records, out)
    logger.info(f"Wrote {len(records)} clips to {out}")
    return len(records)


def main():
    parser = argparse.ArgumentParser(description="Join FSD50K dev metadata into a fedsim manifest")
    parser.add_argument("ground_truth", type=Path, help="FSD50K.ground_truth/dev.csv")
    parser.add_argument("clips_info", type=Path, help="dev_clips_info_FSD50K.json")
    parser.add_argument("--out", type=Path, default=Path("fsd50k_manifest.csv"))
    args = parser.parse_args()
    try:
        build_manifest(args.ground_truth, args.clips_info, args.out)
    except (MetadataError, FileNotFoundError) as e:
        logger.error(f"❌ {e}")
        return 1
    print(f"✅ Manifest written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
