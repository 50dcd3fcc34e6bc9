"""Verification-style scoring: trial lists, cosine scoring and the equal error rate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import DataFormatError


@dataclass
class TrialList:
    pairs: np.ndarray  # (T, 2) row indices into the evaluated dataset
    is_target: np.ndarray  # (T,) bool

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.is_target = np.asarray(self.is_target, dtype=bool)
        if self.is_target.shape != (self.pairs.shape[0],):
            raise ValueError("one label per trial required")
        if not (self.is_target.any() and (~self.is_target).any()):
            raise ValueError("trial list needs at least one target and one nontarget trial")

    def __len__(self):
        return self.pairs.shape[0]

    @property
    def n_target(self) -> int:
        return int(self.is_target.sum())

    @property
    def n_nontarget(self) -> int:
        return int((~self.is_target).sum())

    def validate(self, n_rows: int) -> None:
        if self.pairs.size and (self.pairs.min() < 0 or self.pairs.max() >= n_rows):
            raise ValueError(f"trial indices out of range for {n_rows} rows")


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_scores(vectors: np.ndarray, trials: TrialList) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    trials.validate(v.shape[0])
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms[trials.pairs] == 0):
        raise ValueError("cosine similarity undefined for a zero vector")
    a, b = trials.pairs[:, 0], trials.pairs[:, 1]
    return np.clip(np.einsum("ij,ij->i", v[a], v[b]) / (norms[a] * norms[b]), -1.0, 1.0)


def compute_eer(target_scores, nontarget_scores) -> float:
    """Equal error rate, higher score = more likely same class.

    Thresholds sweep every observed score (plus +inf); a trial is accepted
    when its score is >= the threshold.  The crossing of the false-accept
    and false-reject curves is linearly interpolated between neighbouring
    thresholds.
    """
    tar = np.sort(np.asarray(target_scores, dtype=np.float64).ravel())
    non = np.sort(np.asarray(nontarget_scores, dtype=np.float64).ravel())
    if tar.size == 0 or non.size == 0:
        raise ValueError("need at least one target and one nontarget score")
    thr = np.append(np.unique(np.concatenate([tar, non])), np.inf)
    far = (non.size - np.searchsorted(non, thr, side="left")) / non.size
    frr = np.searchsorted(tar, thr, side="left") / tar.size
    diff = far - frr
    k = int(np.argmax(diff <= 0))
    if diff[k] == 0:
        return float(far[k])
    lam = diff[k - 1] / (diff[k - 1] - diff[k])
    return float(far[k - 1] + lam * (far[k] - far[k - 1]))


def build_trial_list(labels, max_trials_per_class: int = 20, seed: int = 0) -> TrialList:
    """Balanced same-class / different-class pairs.

    Every class with at least two members contributes up to
    ``max_trials_per_class`` distinct within-class pairs and the same number
    of pairs against other classes.  No pair (in either order) repeats.
    """
    labels = np.asarray(labels).astype(str)
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    if len(classes) < 2:
        raise ValueError(f"need at least 2 classes, got {len(classes)}")
    if counts.max() < 2:
        raise ValueError(f"no class has 2 or more members ({len(classes)} singleton classes)")
    if max_trials_per_class < 1:
        raise ValueError("max_trials_per_class must be >= 1")

    rng = np.random.default_rng(seed)
    targets, nontargets, used = [], [], set()
    for c in range(len(classes)):
        members = np.flatnonzero(inverse == c)
        if members.size < 2:
            continue
        iu, ju = np.triu_indices(members.size, k=1)
        k = min(max_trials_per_class, iu.size)
        pick = rng.choice(iu.size, size=k, replace=False)
        for p in np.sort(pick):
            a, b = members[iu[p]], members[ju[p]]
            targets.append((a, b))
            used.add((min(a, b), max(a, b)))

        others = np.flatnonzero(inverse != c)
        n_cand = members.size * others.size
        if n_cand <= 4 * k:
            cand = [(a, b) for a in members for b in others
                    if (min(a, b), max(a, b)) not in used]
            take = rng.choice(len(cand), size=min(k, len(cand)), replace=False)
            chosen = [cand[t] for t in np.sort(take)]
        else:
            chosen = []
            while len(chosen) < k:
                a = int(members[rng.integers(members.size)])
                b = int(others[rng.integers(others.size)])
                key = (min(a, b), max(a, b))
                if key not in used:
                    chosen.append((a, b))
                    used.add(key)
        for a, b in chosen:
            used.add((min(a, b), max(a, b)))
            nontargets.append((a, b))
    pairs = np.array(targets + nontargets, dtype=np.int64)
    flags = np.array([True] * len(targets) + [False] * len(nontargets))
    return TrialList(pairs, flags)


def eer_from_vectors(vectors: np.ndarray, trials: TrialList) -> float:
    scores = cosine_scores(vectors, trials)
    return compute_eer(scores[trials.is_target], scores[~trials.is_target])


def eer_on_reconstructions(model, dataset, trials: TrialList) -> float:
    """EER of cosine-scored trials on mean-latent reconstructions of ``dataset``."""
    from ..vae import reconstruct

    dataset.require_labels()
    x = getattr(dataset, "X", dataset)
    return eer_from_vectors(reconstruct(model, x), trials)


def write_trials(path, trials: TrialList, ids) -> None:
    ids = np.asarray(ids).astype(str)
    with open(path, "w", encoding="utf-8") as fh:
        for (a, b), t in zip(trials.pairs, trials.is_target):
            fh.write(f"{ids[a]} {ids[b]} {'target' if t else 'nontarget'}\n")


def read_trials(path, ids) -> TrialList:
    index = {str(k): i for i, k in enumerate(ids)}
    pairs, flags = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
                raise DataFormatError("expected 'id_a id_b target|nontarget'", lineno)
            try:
                pairs.append((index[parts[0]], index[parts[1]]))
            except KeyError as exc:
                raise DataFormatError(f"unknown id {exc.args[0]!r}", lineno) from None
            flags.append(parts[2] == "target")
    return TrialList(np.array(pairs), np.array(flags))
