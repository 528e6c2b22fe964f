"""Synthetic multi-domain utterance features and feature-archive I/O.

Utterances are sampled from a Gaussian speaker space: each speaker has a
mean vector, each utterance adds a channel offset and per-frame noise.
Target-domain frames are additionally passed through a global affine map
(with an optional second map for a second target language), which gives
the two domains different marginal distributions that adaptation has to
close.  Archives are little-endian binary ("XVF1"), manifests TSV.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

ARCHIVE_MAGIC = b"XVF1"
ARCHIVE_VERSION = 1

MANIFEST_COLUMNS = ("utt_id", "speaker_id", "domain", "language", "frames")


@dataclass(frozen=True)
class ManifestRecord:
    utt_id: str
    speaker_id: str
    domain: str          # "source" | "target"
    language: str
    frames: int


@dataclass
class CorpusSpec:
    frame_dim: int = 10
    source_speakers: int = 200
    source_utts_per_speaker: int = 20
    target_speakers: int = 50
    target_utts_per_speaker: int = 10
    frames_range: tuple = (30, 60)
    speaker_scale: float = 1.0
    channel_scale: float = 0.3
    noise_scale: float = 0.5
    shift_a: np.ndarray | None = None   # (m, m) target-domain map
    shift_b: np.ndarray | None = None   # (m,) target-domain offset
    target_cov_scale: float = 1.0       # extra noise scale in target domain
    second_language: bool = False       # half the target speakers get a
                                        # second language tag and map
    augment_copies: int = 0
    augment_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.source_speakers < 1 or self.target_speakers < 1:
            raise ValueError("speaker counts must be positive")
        if self.source_utts_per_speaker < 1 or self.target_utts_per_speaker < 1:
            raise ValueError("utterance counts must be positive")
        if self.shift_a is not None:
            a = np.asarray(self.shift_a, dtype=np.float64)
            if a.shape != (self.frame_dim, self.frame_dim):
                raise ValueError("shift map has wrong shape")
            if np.linalg.cond(a) > 100:
                raise ValueError("shift map too ill-conditioned")
            self.shift_a = a
        if self.shift_b is not None:
            b = np.asarray(self.shift_b, dtype=np.float64)
            if b.shape != (self.frame_dim,):
                raise ValueError("shift offset has wrong shape")
            self.shift_b = b


def make_domain_shift(frame_dim: int, rotation: float = 0.5,
                      offset: float = 1.0, seed: int = 0):
    """Well-conditioned affine (A, b): rotation-ish map plus an offset."""
    rng = np.random.default_rng([seed, 7])
    q, _ = np.linalg.qr(rng.standard_normal((frame_dim, frame_dim)))
    a = (1.0 - rotation) * np.eye(frame_dim) + rotation * q
    # keep the map invertible and tame
    u, s, vt = np.linalg.svd(a)
    s = np.clip(s, 0.5, 2.0)
    a = u @ np.diag(s) @ vt
    b = offset * rng.standard_normal(frame_dim) / np.sqrt(frame_dim)
    return a, b


def _utt_rng(seed, domain, index):
    code = {"source": 0, "target": 1}[domain]
    return np.random.default_rng([seed, code, index])


def generate_domain(spec: CorpusSpec, domain: str):
    """Archive dict (utt_id -> float32 frames) and manifest records."""
    if domain == "source":
        n_spk = spec.source_speakers
        n_utt = spec.source_utts_per_speaker
        prefix = "src"
    elif domain == "target":
        n_spk = spec.target_speakers
        n_utt = spec.target_utts_per_speaker
        prefix = "tgt"
    else:
        raise ValueError(f"unknown domain {domain!r}")
    m = spec.frame_dim
    spk_rng = np.random.default_rng([spec.seed, {"source": 0, "target": 1}[domain], 10**6])
    means = spec.speaker_scale * spk_rng.standard_normal((n_spk, m))
    shift_a = spec.shift_a if spec.shift_a is not None else np.eye(m)
    shift_b = spec.shift_b if spec.shift_b is not None else np.zeros(m)
    a2 = b2 = None
    if spec.second_language and domain == "target":
        a2, b2 = make_domain_shift(m, rotation=0.7, offset=1.5,
                                   seed=spec.seed + 1)
    archive = {}
    records = []
    lo, hi = spec.frames_range
    index = 0
    for s in range(n_spk):
        lang2 = spec.second_language and domain == "target" and s >= n_spk // 2
        for u in range(n_utt):
            rng = _utt_rng(spec.seed, domain, index)
            t = int(rng.integers(lo, hi + 1))
            noise = spec.noise_scale
            if domain == "target":
                noise *= spec.target_cov_scale
            channel = spec.channel_scale * rng.standard_normal(m)
            frames = means[s] + channel + noise * rng.standard_normal((t, m))
            if domain == "target":
                if lang2:
                    frames = frames @ a2.T + b2
                else:
                    frames = frames @ shift_a.T + shift_b
            base_id = f"{prefix}-{s:04d}-{u:03d}"
            versions = [(base_id, frames)]
            for k in range(spec.augment_copies):
                aug = frames + spec.augment_scale * rng.standard_normal((t, m))
                versions.append((f"{base_id}-aug{k}", aug))
            lang = "lang2" if lang2 else ("lang1" if domain == "target"
                                          else "lang0")
            for uid, fr in versions:
                archive[uid] = fr.astype(np.float32)
                records.append(ManifestRecord(uid, f"{prefix}-spk{s:04d}",
                                              domain, lang, t))
            index += 1
    return archive, records


def generate_corpus(spec: CorpusSpec):
    """Per-domain (archive, manifest) pair, deterministic given the seed."""
    return {domain: generate_domain(spec, domain)
            for domain in ("source", "target")}


# ---------------------------------------------------------------------------
# archive I/O


def write_archive(path, records: dict) -> None:
    """records: utt_id -> (T, m) float32 array."""
    with open(path, "wb") as f:
        f.write(ARCHIVE_MAGIC)
        f.write(struct.pack("<I", ARCHIVE_VERSION))
        f.write(struct.pack("<Q", len(records)))
        for uid, frames in records.items():
            frames = np.ascontiguousarray(frames, dtype="<f4")
            if frames.ndim != 2:
                raise ValueError(f"frames for {uid!r} must be 2-D")
            ub = uid.encode("utf-8")
            f.write(struct.pack("<I", len(ub)))
            f.write(ub)
            f.write(struct.pack("<II", frames.shape[0], frames.shape[1]))
            f.write(frames.tobytes())


def read_archive(path) -> dict:
    records = {}
    with open(path, "rb") as f:
        def need(n, what):
            b = f.read(n)
            if len(b) != n:
                raise ValueError(
                    f"truncated archive {path} at byte {f.tell() - len(b)} "
                    f"while reading {what}")
            return b

        magic = need(4, "magic")
        if magic != ARCHIVE_MAGIC:
            raise ValueError(f"bad archive magic {magic!r}")
        (version,) = struct.unpack("<I", need(4, "version"))
        if version != ARCHIVE_VERSION:
            raise ValueError(f"unsupported archive version {version}")
        (count,) = struct.unpack("<Q", need(8, "record count"))
        for _ in range(count):
            (nlen,) = struct.unpack("<I", need(4, "utt-id length"))
            uid = need(nlen, "utt-id").decode("utf-8")
            if uid in records:
                raise ValueError(f"duplicate utt-id {uid!r} in archive")
            t, m = struct.unpack("<II", need(8, "frame header"))
            data = np.frombuffer(need(4 * t * m, f"frames of {uid}"),
                                 dtype="<f4").reshape(t, m)
            records[uid] = data.astype(np.float32)
    return records


def write_manifest(path, records) -> None:
    with open(path, "w") as f:
        f.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for r in records:
            f.write(f"{r.utt_id}\t{r.speaker_id}\t{r.domain}\t"
                    f"{r.language}\t{r.frames}\n")


def read_manifest(path):
    records = []
    seen = set()
    with open(path) as f:
        header = f.readline().rstrip("\n").split("\t")
        if tuple(header) != MANIFEST_COLUMNS:
            raise ValueError(f"bad manifest header in {path}")
        for lineno, line in enumerate(f, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: bad manifest row")
            if parts[0] in seen:
                raise ValueError(f"{path}:{lineno}: duplicate utt-id")
            seen.add(parts[0])
            records.append(ManifestRecord(parts[0], parts[1], parts[2],
                                          parts[3], int(parts[4])))
    return records
