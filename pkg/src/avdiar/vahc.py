"""Visual diarization branch over face-track files.

Tracks arrive with per-frame speech-activity marks and face embeddings
(produced upstream by an active-speaker detector and a face embedder; this
module only ingests them).  Each track is summarized by the L2-normalized
mean of up to ``max_frames`` randomly sampled embeddings, tracks are merged
by average-linkage agglomerative clustering on negative cosine similarity,
and each cluster becomes one binary speech-activity stream (the OR of its
member tracks' activity).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ActivityMatrix

__all__ = ["FaceTrack", "ClusterResult", "TrackError", "read_tracks",
           "write_tracks", "track_embedding", "ahc_cluster",
           "clusters_to_streams", "synthesize_tracks"]


class TrackError(ValueError):
    pass


@dataclass
class FaceTrack:
    track_id: str
    times: np.ndarray          # frame timestamps, seconds, strictly increasing
    active: np.ndarray         # binary speech-activity mark per frame
    embeddings: np.ndarray     # (n, d) face embeddings

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.active = np.asarray(self.active)
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=float))
        if not self.track_id:
            raise TrackError("track_id must be non-empty")
        if self.times.shape != self.active.shape:
            raise TrackError(f"track {self.track_id!r}: times and activity "
                             f"marks disagree in length")
        if self.times.size and np.any(np.diff(self.times) <= 0):
            raise TrackError(f"track {self.track_id!r}: frame times must be "
                             f"strictly increasing")
        if self.embeddings.size == 0:
            raise TrackError(f"track {self.track_id!r}: needs at least one "
                             f"embedding")


@dataclass
class ClusterResult:
    assignments: dict[str, int] = field(default_factory=dict)
    n_clusters: int = 0

    def members(self, label: int) -> list[str]:
        return sorted(t for t, c in self.assignments.items() if c == label)


# ---- track file I/O ------------------------------------------------------


def read_tracks(path) -> list[FaceTrack]:
    tracks = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                frames = obj["frames"]
                track = FaceTrack(
                    obj["track_id"],
                    np.array([fr["t"] for fr in frames], dtype=float),
                    np.array([fr["active"] for fr in frames]),
                    np.array(obj["embeddings"], dtype=float),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise TrackError(f"{path}:{lineno}: {exc}") from exc
            tracks.append(track)
    return tracks


def write_tracks(path, tracks: list[FaceTrack]) -> None:
    with open(path, "w") as f:
        for t in tracks:
            obj = {"track_id": t.track_id,
                   "frames": [{"t": float(tt), "active": int(a)}
                              for tt, a in zip(t.times, t.active)],
                   "embeddings": t.embeddings.tolist()}
            f.write(json.dumps(obj) + "\n")


# ---- embeddings and clustering -------------------------------------------


def track_embedding(track: FaceTrack, max_frames: int = 50,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """L2-normalized mean of up to max_frames randomly sampled embeddings."""
    rng = rng if rng is not None else np.random.default_rng(0)
    embs = track.embeddings
    if len(embs) > max_frames:
        idx = rng.choice(len(embs), size=max_frames, replace=False)
        embs = embs[idx]
    mean = embs.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        raise ValueError(f"track {track.track_id!r}: mean embedding has zero "
                         f"norm and cannot be direction-normalized")
    return mean / norm


def ahc_cluster(embeddings: dict[str, np.ndarray],
                distance_threshold: float = -0.5) -> ClusterResult:
    """Average-linkage agglomeration on d(u, v) = −cos(u, v).

    Merging continues while the smallest cluster-pair linkage is ≤ the
    threshold; ties are broken by the lexicographically smallest pair of
    cluster representatives (each cluster represented by its smallest member
    track id), making the result independent of input order."""
    if not embeddings:
        return ClusterResult({}, 0)
    ids = sorted(embeddings)
    vecs = np.stack([np.asarray(embeddings[t], dtype=float) for t in ids])
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    if np.any(norms == 0):
        bad = ids[int(np.argmin(norms[:, 0]))]
        raise ValueError(f"track {bad!r}: zero-norm embedding")
    unit = vecs / norms
    point_dist = -(unit @ unit.T)

    members: dict[int, list[int]] = {i: [i] for i in range(len(ids))}
    dist: dict[tuple[int, int], float] = {
        (i, j): float(point_dist[i, j])
        for i in range(len(ids)) for j in range(i + 1, len(ids))}

    def rep(key: int) -> str:
        return ids[min(members[key])]

    while len(members) > 1:
        best = min(dist.items(),
                   key=lambda kv: (kv[1], tuple(sorted((rep(kv[0][0]),
                                                        rep(kv[0][1]))))))
        (a, b), d = best
        if d > distance_threshold:
            break
        # Lance-Williams update for average linkage
        na, nb = len(members[a]), len(members[b])
        for c in members:
            if c in (a, b):
                continue
            dac = dist.pop((min(a, c), max(a, c)))
            dbc = dist.pop((min(b, c), max(b, c)))
            dist[(min(a, c), max(a, c))] = (na * dac + nb * dbc) / (na + nb)
        del dist[(a, b)]
        members[a] = members[a] + members[b]
        del members[b]

    ordered = sorted(members.values(), key=lambda m: ids[min(m)])
    assignments = {ids[i]: label for label, group in enumerate(ordered)
                   for i in group}
    return ClusterResult(assignments, len(ordered))


def clusters_to_streams(result: ClusterResult, tracks: list[FaceTrack],
                        frame_shift_s: float, n_frames: int) -> ActivityMatrix:
    """Binary (T, n_clusters) activity: a cluster is active in a frame when
    any member track has an active mark falling inside that frame's bin;
    frames with no face data stay zero."""
    mat = np.zeros((n_frames, result.n_clusters))
    by_id = {t.track_id: t for t in tracks}
    for tid, label in result.assignments.items():
        if tid not in by_id:
            raise KeyError(f"cluster assignment references unknown track "
                           f"{tid!r}")
        track = by_id[tid]
        on = track.times[np.asarray(track.active) > 0]
        idx = np.floor(on / frame_shift_s + 1e-6).astype(int)
        idx = idx[(idx >= 0) & (idx < n_frames)]
        mat[idx, label] = 1.0
    return ActivityMatrix(mat, frame_shift_s)


# ---- synthetic track generation ------------------------------------------


def synthesize_tracks(segs, rng: np.random.Generator, embedding_dim: int = 32,
                      frame_rate: float = 25.0, visibility: float = 1.0,
                      noise: float = 0.05, pad_s: float = 0.2) -> list[FaceTrack]:
    """Face tracks from a ground-truth SegmentList: one track per (speaker,
    segment) kept with probability ``visibility``, active inside the segment
    and silent in a small visible pad around it.  Each speaker gets an
    orthonormal identity direction; per-frame embeddings scatter around it
    with varied magnitudes, keeping same-speaker tracks tightly aligned in
    cosine and different speakers nearly orthogonal."""
    speakers = segs.speakers()
    if not speakers:
        return []
    if len(speakers) > embedding_dim:
        raise ValueError(f"cannot build {len(speakers)} orthonormal speaker "
                         f"directions in {embedding_dim} dimensions")
    basis = np.linalg.qr(rng.normal(size=(embedding_dim, len(speakers))))[0].T
    tracks = []
    counters = {spk: 0 for spk in speakers}
    for seg in segs:
        if rng.random() > visibility:
            continue
        start = max(0.0, seg.onset - pad_s)
        stop = seg.offset + pad_s
        n = max(2, int(np.floor((stop - start) * frame_rate)))
        times = start + np.arange(n) / frame_rate
        active = ((times >= seg.onset) & (times < seg.offset)).astype(int)
        direction = basis[speakers.index(seg.speaker)]
        scale = rng.uniform(0.5, 2.0, size=(n, 1))
        embs = direction * scale + noise * rng.normal(size=(n, embedding_dim))
        k = counters[seg.speaker]
        counters[seg.speaker] += 1
        tracks.append(FaceTrack(f"{seg.speaker}-{k:03d}", times, active, embs))
    return tracks
