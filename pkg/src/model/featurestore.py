"""
On-disk dataset of precomputed two-level image features and tokenized captions.

Layout of a dataset directory:
    manifest.json   UTF-8 JSON, fields of DatasetManifest
    global.bin      f32 LE, item -> global node -> dim
    regional.bin    f32 LE, item -> regional node -> dim
    captions.bin    u32 LE, item -> caption -> word (0 = padding, trailing only)
"""

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, NamedTuple, Sequence, Tuple

import numpy as np

from model.errors import BadToken, ConfigError, EmptyCaption, IoFailure, MissingBlob, NonFinite, SizeMismatch
from utils.logger import setup_logger

logger = setup_logger(__name__)

MANIFEST_FILENAME = "manifest.json"
GLOBAL_BLOB = "global.bin"
REGIONAL_BLOB = "regional.bin"
CAPTIONS_BLOB = "captions.bin"
FORMAT_VERSION = 1
PAD_ID = 0


@dataclass(frozen=True)
class DatasetManifest:
    version: int
    n_items: int
    captions_per_image: int
    global_nodes: int
    regional_nodes: int
    feature_dim: int
    vocab_size: int
    max_words: int
    dtype: str = "f32le"

    def validate(self) -> None:
        counts = {
            "n_items": self.n_items,
            "captions_per_image": self.captions_per_image,
            "global_nodes": self.global_nodes,
            "regional_nodes": self.regional_nodes,
            "feature_dim": self.feature_dim,
            "max_words": self.max_words,
            "vocab_size": self.vocab_size,
        }
        for key, value in counts.items():
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"manifest field '{key}' must be a positive integer, got {value!r}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must leave room for at least one word besides padding")
        if self.version != FORMAT_VERSION:
            raise ConfigError(f"unsupported dataset version {self.version} (expected {FORMAT_VERSION})")
        if self.dtype != "f32le":
            raise ConfigError(f"unsupported feature dtype '{self.dtype}'")

    def expected_bytes(self) -> Dict[str, int]:
        return {
            GLOBAL_BLOB: self.n_items * self.global_nodes * self.feature_dim * 4,
            REGIONAL_BLOB: self.n_items * self.regional_nodes * self.feature_dim * 4,
            CAPTIONS_BLOB: self.n_items * self.captions_per_image * self.max_words * 4,
        }

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


@dataclass
class FeatureSet:
    """One image's global grid features F, regional features R and its captions."""

    index: int
    F: np.ndarray
    R: np.ndarray
    captions: List[np.ndarray]


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 7
    n_items: int = 16
    n: int = 16
    k: int = 12
    D_o: int = 64
    vocab_size: int = 200
    m: int = 12
    captions_per_image: int = 5
    cluster_count: int = 0  # 0 means one latent concept per item

    @property
    def clusters(self) -> int:
        return self.cluster_count or self.n_items

    def validate(self) -> None:
        for f in fields(self):
            if f.name in ("seed", "cluster_count"):
                continue
            value = getattr(self, f.name)
            if value < 1:
                raise ConfigError(f"synthetic '{f.name}' must be >= 1, got {value}")
        if self.cluster_count < 0 or self.clusters > self.n_items:
            raise ConfigError(f"cluster_count {self.cluster_count} must lie in [1, n_items={self.n_items}]")
        if self.vocab_size - 1 < self.clusters:
            raise ConfigError(f"vocab_size {self.vocab_size} too small for {self.clusters} word groups")


class FeatureBatch(NamedTuple):
    F: np.ndarray
    R: np.ndarray


def stack_features(sets: Sequence[FeatureSet]) -> FeatureBatch:
    """Stacks images into (B, n, D_o) and (B, k, D_o) float64 arrays."""
    return FeatureBatch(
        F=np.stack([fs.F for fs in sets]).astype(np.float64),
        R=np.stack([fs.R for fs in sets]).astype(np.float64),
    )


def caption_length(row: np.ndarray) -> int:
    """Position of the first padding id, or the full row length."""
    pads = np.flatnonzero(row == PAD_ID)
    return int(pads[0]) if pads.size else int(row.shape[0])


def resolve_manifest_path(path: Path) -> Path:
    """Accepts a dataset directory or its manifest file."""
    path = Path(path)
    return path / MANIFEST_FILENAME if path.is_dir() else path


def read_manifest(manifest_path: Path) -> DatasetManifest:
    try:
        raw = json.loads(resolve_manifest_path(manifest_path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        logger.error(f"Manifest not found: {manifest_path}")
        raise IoFailure(f"manifest not found: {manifest_path}") from e
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as e:
        logger.error(f"Manifest unreadable: {manifest_path}: {e}")
        raise IoFailure(f"cannot parse manifest {manifest_path}: {e}") from e

    expected = {f.name for f in fields(DatasetManifest)}
    if not isinstance(raw, dict) or set(raw) != expected:
        got = sorted(raw) if isinstance(raw, dict) else type(raw).__name__
        raise IoFailure(f"manifest fields must be exactly {sorted(expected)}, got {got}")
    manifest = DatasetManifest(**raw)
    manifest.validate()
    return manifest


def _read_blob(path: Path, expected: int, dtype: str) -> np.ndarray:
    if not path.is_file():
        logger.error(f"Blob missing: {path}")
        raise MissingBlob(f"missing blob {path.name} in {path.parent}")
    size = path.stat().st_size
    if size != expected:
        logger.error(f"Blob {path.name} is {size} bytes, manifest implies {expected}")
        raise SizeMismatch(f"{path.name}: {size} bytes on disk, manifest implies {expected}")
    return np.fromfile(path, dtype=dtype)


def load_dataset(manifest_path: Path) -> List[FeatureSet]:
    """
    Loads and validates a dataset from its manifest.

    Args:
        manifest_path: Path to manifest.json, or to the directory holding it.

    Returns:
        List[FeatureSet]: n_items feature sets in item order.

    Raises:
        MissingBlob, SizeMismatch, BadToken, EmptyCaption, NonFinite, IoFailure
    """
    manifest_path = resolve_manifest_path(manifest_path)
    root = manifest_path.parent
    mf = read_manifest(manifest_path)
    sizes = mf.expected_bytes()

    # 1. Raw blobs, each checked against the manifest-implied length
    global_feats = _read_blob(root / GLOBAL_BLOB, sizes[GLOBAL_BLOB], "<f4").reshape(
        mf.n_items, mf.global_nodes, mf.feature_dim)
    regional_feats = _read_blob(root / REGIONAL_BLOB, sizes[REGIONAL_BLOB], "<f4").reshape(
        mf.n_items, mf.regional_nodes, mf.feature_dim)
    tokens = _read_blob(root / CAPTIONS_BLOB, sizes[CAPTIONS_BLOB], "<u4").reshape(
        mf.n_items, mf.captions_per_image, mf.max_words)
    sets = assemble_feature_sets(mf, global_feats, regional_feats, tokens)
    logger.info(f"Loaded {mf.n_items} items from {root} (n={mf.global_nodes}, k={mf.regional_nodes}, "
                f"D_o={mf.feature_dim})")
    return sets


def assemble_feature_sets(mf: DatasetManifest, global_feats: np.ndarray, regional_feats: np.ndarray,
                          tokens: np.ndarray) -> List[FeatureSet]:
    """Validates raw arrays shaped by the manifest and splits them per item."""
    # 1. Content checks
    for name, arr in ((GLOBAL_BLOB, global_feats), (REGIONAL_BLOB, regional_feats)):
        if not np.all(np.isfinite(arr)):
            bad = int(np.argwhere(~np.isfinite(arr))[0][0])
            logger.error(f"{name}: non-finite feature in item {bad}")
            raise NonFinite(f"{name} holds NaN/Inf (first at item {bad})")

    if np.any(tokens >= mf.vocab_size):
        item, cap, pos = (int(v) for v in np.argwhere(tokens >= mf.vocab_size)[0])
        logger.error(f"Token id {tokens[item, cap, pos]} >= vocab_size {mf.vocab_size}")
        raise BadToken(f"item {item} caption {cap} word {pos}: id {tokens[item, cap, pos]} >= vocab_size {mf.vocab_size}")

    # 2. Assemble, checking that padding is trailing only and every caption has a word
    sets: List[FeatureSet] = []
    for i in range(mf.n_items):
        captions = []
        for c in range(mf.captions_per_image):
            row = tokens[i, c]
            length = caption_length(row)
            if np.any(row[length:] != PAD_ID):
                raise BadToken(f"item {i} caption {c}: word after padding at position {length}")
            if length == 0:
                logger.error(f"Item {i} caption {c} is all padding")
                raise EmptyCaption(f"item {i} caption {c}: no word before padding")
            captions.append(row[:length].astype(np.int64))
        sets.append(FeatureSet(index=i, F=global_feats[i], R=regional_feats[i], captions=captions))
    return sets


def synthesize(spec: SyntheticSpec) -> Dict[str, np.ndarray]:
    """
    Draws the arrays of a synthetic dataset in their on-disk dtypes.

    Each item belongs to a latent concept. Its global and regional features are
    noisy copies of the concept's two prototypes, and most caption words come
    from the concept's word group (word w belongs to group (w - 1) % clusters).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    clusters = spec.clusters

    concept = rng.permutation(np.arange(spec.n_items) % clusters)
    global_proto = rng.standard_normal((clusters, spec.D_o))
    regional_proto = rng.standard_normal((clusters, spec.D_o))

    def features(proto: np.ndarray, nodes: int) -> np.ndarray:
        gain = rng.uniform(0.5, 1.5, size=(spec.n_items, nodes, 1))
        noise = 0.5 * rng.standard_normal((spec.n_items, nodes, spec.D_o))
        return (gain * proto[concept][:, None, :] + noise).astype("<f4")

    global_feats = features(global_proto, spec.n)
    regional_feats = features(regional_proto, spec.k)

    words = np.arange(1, spec.vocab_size)
    groups = [words[(words - 1) % clusters == c] for c in range(clusters)]
    tokens = np.zeros((spec.n_items, spec.captions_per_image, spec.m), dtype="<u4")
    low = max(1, spec.m // 2)
    for i in range(spec.n_items):
        own = groups[concept[i]]
        for c in range(spec.captions_per_image):
            length = int(rng.integers(low, spec.m + 1))
            on_topic = rng.random(length) < 0.85
            tokens[i, c, :length] = np.where(
                on_topic,
                rng.choice(own, size=length),
                rng.choice(words, size=length),
            )

    return {GLOBAL_BLOB: global_feats, REGIONAL_BLOB: regional_feats,
            CAPTIONS_BLOB: tokens, "concept": concept}


def generate_synthetic(spec: SyntheticSpec, out_dir: Path) -> DatasetManifest:
    """
    Writes a deterministic synthetic dataset; equal specs give byte-identical files.

    Raises:
        IoFailure: If the output directory or a file cannot be written.
    """
    arrays = synthesize(spec)
    manifest = synthetic_manifest(spec)
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name in (GLOBAL_BLOB, REGIONAL_BLOB, CAPTIONS_BLOB):
            (out_dir / name).write_bytes(arrays[name].tobytes())
        (out_dir / MANIFEST_FILENAME).write_text(
            json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        logger.error(f"Failed to write synthetic dataset to {out_dir}: {e}")
        raise IoFailure(f"cannot write dataset to {out_dir}: {e}") from e

    logger.info(f"Wrote synthetic dataset ({spec.n_items} items, seed {spec.seed}) to {out_dir}")
    return manifest


def synthetic_manifest(spec: SyntheticSpec) -> DatasetManifest:
    return DatasetManifest(
        version=FORMAT_VERSION,
        n_items=spec.n_items,
        captions_per_image=spec.captions_per_image,
        global_nodes=spec.n,
        regional_nodes=spec.k,
        feature_dim=spec.D_o,
        vocab_size=spec.vocab_size,
        max_words=spec.m,
    )


def synthetic_dataset(spec: SyntheticSpec) -> Tuple[DatasetManifest, List[FeatureSet]]:
    """The synthetic dataset of `spec`, built in memory without touching disk."""
    arrays = synthesize(spec)
    manifest = synthetic_manifest(spec)
    sets = assemble_feature_sets(manifest, arrays[GLOBAL_BLOB], arrays[REGIONAL_BLOB], arrays[CAPTIONS_BLOB])
    return manifest, sets
