"""On-disk phantom datasets: one FFTN checkpoint per sample plus a CSV manifest."""
from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError
from .federation.wire import load_checkpoint, save_checkpoint
from .params import ParamTree
from .phantom import Sample, SiteDataset, build_site_dataset

MANIFEST = "manifest.csv"
MANIFEST_COLUMNS = ("file", "site", "subject", "count_level", "seed", "split")


def build_datasets(config) -> list:
    return [build_site_dataset(p, config.n_subjects, config.split, config.size) for p in config.sites]


def write_cache(datasets: Sequence[SiteDataset], root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for ds in datasets:
        for split in ("train", "val", "test"):
            for s in ds.split(split):
                rel = f"site{s.site_id}/{split}/s{s.subject_id:03d}_d{s.d:.4f}.fftn"
                path = root / rel
                path.parent.mkdir(parents=True, exist_ok=True)
                tree = ParamTree({"d": Tensor(np.array([s.d], np.float32)),
                                  "x": Tensor(np.asarray(s.x, np.float32)),
                                  "y": Tensor(np.asarray(s.y, np.float32))})
                save_checkpoint(path, tree, site_id=s.site_id)
                rows.append((rel, s.site_id, s.subject_id, repr(float(s.d)), ds.profile.seed, split))
    with open(root / MANIFEST, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        w.writerows(rows)
    return root / MANIFEST


def read_cache(root, profiles: Sequence) -> list:
    """Load datasets for ``profiles``; manifest seeds must match the profiles."""
    root = Path(root)
    try:
        with open(root / MANIFEST, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
                raise ConfigError(f"{root / MANIFEST}: unexpected columns {reader.fieldnames}")
            rows = list(reader)
    except OSError as exc:
        raise ConfigError(f"cannot read dataset manifest: {exc}") from None
    by_site = {p.site_id: SiteDataset(p) for p in profiles}
    for row in rows:
        site = int(row["site"])
        if site not in by_site:
            continue
        ds = by_site[site]
        if int(row["seed"]) != ds.profile.seed:
            raise ConfigError(f"manifest seed {row['seed']} for site {site} does not match "
                              f"data_seed {ds.profile.seed}")
        payload = load_checkpoint(root / row["file"]).payload
        d = float(row["count_level"])
        if np.float32(d) != payload["d"].data[0]:
            raise ConfigError(f"{row['file']}: count level disagrees with the manifest")
        ds.split(row["split"]).append(
            Sample(payload["x"].data, payload["y"].data, d, site, int(row["subject"])))
    missing = [s for s, ds in by_site.items() if not ds.train]
    if missing:
        raise ConfigError(f"dataset cache has no training samples for site(s) {missing}")
    return [by_site[p.site_id] for p in profiles]


def cache_exists(root) -> bool:
    return os.path.exists(Path(root) / MANIFEST)
