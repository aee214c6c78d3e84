#!/usr/bin/env python3
"""
Check the uploader partition of the FSD50K development set.

This script verifies that:
1. Exactly 57 uploaders contribute 100 or more training clips
2. Those uploaders hold 35% (+/- 1%) of the training clips
3. The train-split uploader histogram matches the published counts
"""
import sys
from pathlib import Path
from typing import Dict, List, Tuple

from loguru import logger

from fedsim.config import HIGH_VOLUME_MIN_CLIPS
from fedsim.data import ingest_metadata, partition_by_uploader, uploader_histogram

EXPECTED_CLIENTS = 57
EXPECTED_SHARE = 0.35
SHARE_TOLERANCE = 0.01
EXPECTED_UPLOADERS = 3647
EXPECTED_SINGLETONS = 1635
EXPECTED_AT_MOST_TEN = 3080


def partition_checks(manifest: Path) -> List[Tuple[str, bool]]:
    """
    Evaluate every partition check against a manifest.

    Returns:
        (description, passed) pairs
    """
    records = ingest_metadata(manifest)
    clients = partition_by_uploader(records, HIGH_VOLUME_MIN_CLIPS)
    train_total = sum(1 for r in records if r.split == "train")
    share = sum(c.n_k for c in clients) / train_total
    histogram: Dict[str, int] = uploader_histogram([r for r in records if r.split == "train"])
    uploaders = sum(histogram.values())
    return [
        (f"{len(clients)} high-volume clients (expected {EXPECTED_CLIENTS})",
         len(clients) == EXPECTED_CLIENTS),
        (f"high-volume share {share:.1%} (expected {EXPECTED_SHARE:.0%})",
         abs(share - EXPECTED_SHARE) <= SHARE_TOLERANCE),
        (f"{uploaders} uploaders (expected {EXPECTED_UPLOADERS})",
         uploaders == EXPECTED_UPLOADERS),
        (f"{histogram['1']} single-clip uploaders (expected {EXPECTED_SINGLETONS})",
         histogram["1"] == EXPECTED_SINGLETONS),
        (f"{histogram['1'] + histogram['2-10']} uploaders with at most 10 clips "
         f"(expected {EXPECTED_AT_MOST_TEN})",
         histogram["1"] + histogram["2-10"] == EXPECTED_AT_MOST_TEN),
    ]


def main():
    if len(sys.argv) != 2:
        print("Usage: check_fsd50k_partition.py MANIFEST")
        return 1
    checks = partition_checks(Path(sys.argv[1]))
    for description, passed in checks:
        if passed:
            logger.info(f"✅ {description}")
        else:
            logger.error(f"❌ {description}")
    return 0 if all(passed for _, passed in checks) else 1


if __name__ == "__main__":
    sys.exit(main())
