"""Verification backend: centering, LDA, length-norm, PLDA, adaptation.

The PLDA here is the two-covariance model: a class mean drawn from
N(mu, B) and observations drawn from N(class mean, W).  Scoring uses the
simultaneously diagonalized form; unsupervised adaptation redistributes
the excess variance of adaptation data between B and W.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg

BUNDLE_MAGIC = b"ADVB"
BUNDLE_VERSION = 1

EIG_FLOOR = 1e-8


@dataclass
class BackendTransform:
    mean: np.ndarray          # (d,) centering mean
    lda: np.ndarray           # (r, d) projection rows
    length_norm: bool = True


@dataclass
class PldaModel:
    mu: np.ndarray            # (r,)
    between: np.ndarray       # (r, r) symmetric PSD
    within: np.ndarray        # (r, r) symmetric PD

    def validate(self):
        r = self.mu.shape[0]
        for name, m in (("between", self.between), ("within", self.within)):
            if m.shape != (r, r):
                raise ValueError(f"{name} covariance has wrong shape")
            if not np.allclose(m, m.T, atol=1e-8):
                raise ValueError(f"{name} covariance not symmetric")
        if np.linalg.eigvalsh(self.between).min() < -1e-8:
            raise ValueError("between covariance not PSD")
        if np.linalg.eigvalsh(self.within).min() <= 0:
            raise ValueError("within covariance not PD")


@dataclass
class AdaptParams:
    xi: float = 0.25    # share of excess variance given to between-class
    eta: float = 0.75   # share given to within-class

    def __post_init__(self):
        if self.xi < 0 or self.eta < 0:
            raise ValueError("adaptation shares must be non-negative")


def _sym(m):
    return 0.5 * (m + m.T)


def _floor_psd(m, floor=EIG_FLOOR):
    w, v = np.linalg.eigh(_sym(m))
    return _sym(v @ np.diag(np.maximum(w, floor)) @ v.T)


def apply_transform(t: BackendTransform, x: np.ndarray) -> np.ndarray:
    """Center, project, and length-normalize to radius sqrt(r)."""
    x = np.asarray(x, dtype=np.float64)
    y = t.lda @ (x - t.mean)
    if t.length_norm:
        norm = np.linalg.norm(y)
        if norm == 0.0:
            raise ValueError("cannot length-normalize a zero vector")
        y = np.sqrt(y.shape[0]) * y / norm
    return y


def estimate_lda(vectors: np.ndarray, labels, r: int) -> np.ndarray:
    """Top-r generalized eigenvectors of (between, within) scatter.

    Rows satisfy row_i @ within @ row_j.T = delta_ij.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("LDA needs at least 2 classes")
    d = vectors.shape[1]
    if r > min(d, len(classes) - 1):
        raise ValueError(f"LDA dim {r} exceeds rank bound")
    gmean = vectors.mean(axis=0)
    sb = np.zeros((d, d))
    sw = np.zeros((d, d))
    for c in classes:
        xc = vectors[labels == c]
        if xc.shape[0] < 2:
            raise ValueError(f"class {c!r} has fewer than 2 vectors")
        cmean = xc.mean(axis=0)
        diff = cmean - gmean
        sb += xc.shape[0] * np.outer(diff, diff)
        xc0 = xc - cmean
        sw += xc0.T @ xc0
    sb /= vectors.shape[0]
    sw /= vectors.shape[0]
    sw += EIG_FLOOR * np.eye(d)
    evals, evecs = scipy.linalg.eigh(_sym(sb), _sym(sw))
    order = np.argsort(evals)[::-1][:r]
    return evecs[:, order].T


def estimate_transform(vectors, labels, r, length_norm=True,
                       center_at=None) -> BackendTransform:
    """Fit centering mean and LDA on labeled training vectors.

    `center_at` overrides the centering mean (e.g. the mean of an
    unlabeled adaptation set, applied to evaluation data).
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    mean = vectors.mean(axis=0) if center_at is None else \
        np.asarray(center_at, dtype=np.float64)
    lda = estimate_lda(vectors - mean, labels, r)
    return BackendTransform(mean=mean, lda=lda, length_norm=length_norm)


def _class_suff_stats(vectors, labels):
    labels = np.asarray(labels)
    classes = np.unique(labels)
    groups = [np.asarray(vectors)[labels == c] for c in classes]
    return groups


def plda_train_em(vectors: np.ndarray, labels, iterations: int = 20,
                  return_ll: bool = False):
    """Fit the two-covariance PLDA by EM.

    Per-iteration log-likelihood is monotone non-decreasing.  Raises if
    the within-class covariance is unidentifiable (all singleton classes).
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    groups = _class_suff_stats(vectors, labels)
    if len(groups) < 2:
        raise ValueError("PLDA training needs at least 2 classes")
    if all(g.shape[0] < 2 for g in groups):
        raise ValueError(
            "within-class covariance unidentifiable: every class has a "
            "single utterance")
    r = vectors.shape[1]
    n_total = vectors.shape[0]
    mu = vectors.mean(axis=0)
    gv = np.cov(vectors.T, bias=True).reshape(r, r)
    between = _floor_psd(0.5 * gv, 1e-6)
    within = _floor_psd(0.5 * gv, 1e-6)
    lls = []
    for _ in range(iterations):
        b_inv = np.linalg.inv(between)
        w_inv = np.linalg.inv(within)
        ll = 0.0
        ey = []
        eyy_sum = np.zeros((r, r))
        resid = np.zeros((r, r))
        mu_acc = np.zeros(r)
        sign_b, logdet_b = np.linalg.slogdet(between)
        sign_w, logdet_w = np.linalg.slogdet(within)
        for g in groups:
            n = g.shape[0]
            d = g - mu
            lam = b_inv + n * w_inv
            lam_inv = np.linalg.inv(lam)
            q = w_inv @ d.sum(axis=0)
            m = lam_inv @ q
            # marginal log-likelihood of the class, latent mean integrated out
            sign_l, logdet_l = np.linalg.slogdet(lam)
            ll += (-0.5 * n * r * np.log(2 * np.pi)
                   - 0.5 * n * logdet_w - 0.5 * logdet_b - 0.5 * logdet_l
                   - 0.5 * np.einsum("ij,jk,ik->", d, w_inv, d)
                   + 0.5 * q @ lam_inv @ q)
            ey.append(m)
            eyy_sum += np.outer(m, m) + lam_inv
            e = d - m
            resid += e.T @ e + n * lam_inv
            mu_acc += (g - m).sum(axis=0)
        lls.append(ll)
        mu = mu_acc / n_total
        between = _floor_psd(eyy_sum / len(groups))
        within = _floor_psd(resid / n_total)
    model = PldaModel(mu=mu, between=between, within=within)
    if return_ll:
        return model, lls
    return model


def _diagonalize(model: PldaModel):
    """Transform T with T W T' = I and T B T' = diag(psi)."""
    w_evals, w_evecs = np.linalg.eigh(_sym(model.within))
    w_evals = np.maximum(w_evals, EIG_FLOOR)
    whiten = w_evecs @ np.diag(w_evals ** -0.5) @ w_evecs.T
    b_w = _sym(whiten @ model.between @ whiten.T)
    psi, u = np.linalg.eigh(b_w)
    psi = np.maximum(psi, 0.0)
    t = u.T @ whiten
    return t, psi


def plda_score(model: PldaModel, enroll: np.ndarray,
               test: np.ndarray) -> float:
    """Log-likelihood ratio same-class vs different-class for one pair."""
    scorer = PldaScorer(model)
    return float(scorer.score(np.asarray(enroll)[None, :],
                              np.asarray(test)[None, :])[0])


class PldaScorer:
    """Precomputed diagonalized model for fast batch scoring."""

    def __init__(self, model: PldaModel):
        if model.mu.shape[0] != model.between.shape[0]:
            raise ValueError("model dimension mismatch")
        self.model = model
        self.t, self.psi = _diagonalize(model)

    def score(self, enroll: np.ndarray, test: np.ndarray) -> np.ndarray:
        """Row-wise LLRs for paired (n, r) enroll and test arrays."""
        enroll = np.asarray(enroll, dtype=np.float64)
        test = np.asarray(test, dtype=np.float64)
        if enroll.shape != test.shape or enroll.shape[1] != self.model.mu.shape[0]:
            raise ValueError("enroll/test dimension mismatch")
        e = (enroll - self.model.mu) @ self.t.T
        t_ = (test - self.model.mu) @ self.t.T
        psi = self.psi
        # per-dimension 2x2 Gaussian with cov [[psi+1, psi], [psi, psi+1]]
        var_m = psi + 1.0
        det_same = var_m ** 2 - psi ** 2
        # inverse of the 2x2: (1/det) [[psi+1, -psi], [-psi, psi+1]]
        q_same = (var_m * (e ** 2 + t_ ** 2) - 2 * psi * e * t_) / det_same
        ll_same = -0.5 * (np.log(det_same) + q_same)
        ll_diff = -0.5 * (2 * np.log(var_m) + (e ** 2 + t_ ** 2) / var_m)
        return (ll_same - ll_diff).sum(axis=1)


def plda_adapt(model: PldaModel, vectors: np.ndarray,
               p: AdaptParams) -> PldaModel:
    """Redistribute the adaptation data's excess variance into the model.

    In the basis where the model's total covariance is identity and the
    adaptation covariance diagonal, each direction with observed variance
    v > 1 contributes excess e = v - 1: xi*e is added to the
    between-class diagonal and eta*e to the within-class diagonal.
    """
    model.validate()
    vectors = np.asarray(vectors, dtype=np.float64)
    r = model.mu.shape[0]
    if vectors.ndim != 2 or vectors.shape[1] != r:
        raise ValueError("adaptation vectors have wrong dimension")
    cov = np.cov(vectors.T, bias=True).reshape(r, r)
    if vectors.shape[0] < r:
        # too few vectors for a stable full covariance: shrink to diagonal
        cov = 0.9 * cov + 0.1 * np.diag(np.diag(cov))
    total = _sym(model.between + model.within)
    t_evals, t_evecs = np.linalg.eigh(total)
    t_evals = np.maximum(t_evals, EIG_FLOOR)
    whiten = t_evecs @ np.diag(t_evals ** -0.5) @ t_evecs.T
    v, u = np.linalg.eigh(_sym(whiten @ cov @ whiten.T))
    t = u.T @ whiten          # T total T' = I, T cov T' = diag(v)
    t_inv = np.linalg.inv(t)
    excess = np.maximum(v - 1.0, 0.0)
    b_t = t @ model.between @ t.T + p.xi * np.diag(excess)
    w_t = t @ model.within @ t.T + p.eta * np.diag(excess)
    between = _sym(t_inv @ b_t @ t_inv.T)
    within = _sym(t_inv @ w_t @ t_inv.T)
    return PldaModel(mu=model.mu.copy(), between=between, within=within)


# ---------------------------------------------------------------------------
# backend bundle serialization


def _write_arr(f, name, arr):
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    arr = np.ascontiguousarray(arr, dtype="<f8")
    f.write(struct.pack("<I", arr.ndim))
    for dim in arr.shape:
        f.write(struct.pack("<I", dim))
    f.write(arr.tobytes())


def _read_exact(f, n, what):
    b = f.read(n)
    if len(b) != n:
        raise ValueError(f"truncated bundle while reading {what}")
    return b


def _read_arr(f):
    (nlen,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
    name = _read_exact(f, nlen, "name").decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
    shape = tuple(struct.unpack("<I", _read_exact(f, 4, "dim"))[0]
                  for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(f, 8 * count, name), dtype="<f8")
    return name, data.reshape(shape).astype(np.float64)


def save_bundle(path, transform: BackendTransform, model: PldaModel) -> None:
    with open(path, "wb") as f:
        f.write(BUNDLE_MAGIC)
        f.write(struct.pack("<I", BUNDLE_VERSION))
        meta = json.dumps({"length_norm": transform.length_norm}).encode()
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        for name, arr in (("mean", transform.mean), ("lda", transform.lda),
                          ("mu", model.mu), ("between", model.between),
                          ("within", model.within)):
            _write_arr(f, name, arr)


def load_bundle(path):
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != BUNDLE_MAGIC:
            raise ValueError(f"bad bundle magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != BUNDLE_VERSION:
            raise ValueError(f"unsupported bundle version {version}")
        (mlen,) = struct.unpack("<I", _read_exact(f, 4, "meta length"))
        meta = json.loads(_read_exact(f, mlen, "meta"))
        arrs = dict(_read_arr(f) for _ in range(5))
    transform = BackendTransform(mean=arrs["mean"], lda=arrs["lda"],
                                 length_norm=bool(meta["length_norm"]))
    model = PldaModel(mu=arrs["mu"], between=arrs["between"],
                      within=arrs["within"])
    return transform, model
