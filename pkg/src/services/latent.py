#!/usr/bin/env python3
"""
Latent space encoding: a shared orthonormal code matrix C for several modalities.

For each modality X (F x N) and balance parameter lam the kernel

    Delta = X^T (lam X X^T + (1 - lam) I)^-1 X

is N x N. The code C (d x N, orthonormal rows) holds the top-d eigenvectors of
Omega = sum(Delta_i), and each modality's encoder/decoder is

    U = C X^T (lam X X^T + (1 - lam) I)^-1.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .base import BaseService
from .datasets import Dataset, LabelVector, assemble_dataset
from .exceptions import NumericalError, ValidationError
from .matrices import ModalityMatrix

logger = logging.getLogger('lse')

SYMMETRY_TOL = 1e-10
PSD_TOL = 1e-8
ORTHONORMAL_TOL = 1e-8
RANK_TOL = 1e-10
SOLVERS = ("dense", "iterative")


@dataclass(frozen=True)
class Hyperparams:
    lam: float
    latent_dim: int
    standardize: bool = False
    solver: str = "dense"

    def __post_init__(self):
        lam = float(self.lam)
        if not (0.0 <= lam < 1.0):
            raise ValidationError(f"lambda must satisfy 0 <= lambda < 1, got {lam}", contract="lambda-range")
        if int(self.latent_dim) != self.latent_dim or int(self.latent_dim) < 1:
            raise ValidationError(f"latent dimension must be an integer >= 1, got {self.latent_dim}", contract="latent-dim")
        if self.solver not in SOLVERS:
            raise ValidationError(f"solver must be one of {SOLVERS}, got {self.solver!r}", contract="solver")
        object.__setattr__(self, 'lam', lam)
        object.__setattr__(self, 'latent_dim', int(self.latent_dim))
        object.__setattr__(self, 'standardize', bool(self.standardize))

    def with_dim(self, latent_dim):
        return Hyperparams(self.lam, latent_dim, self.standardize, self.solver)


@dataclass(frozen=True, eq=False)
class KernelMatrix:
    """Symmetric positive-semidefinite N x N kernel"""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValidationError(f"kernel must be square, got shape {values.shape}", contract="kernel-shape")
        scale = max(np.linalg.norm(values), 1.0)
        asym = np.linalg.norm(values - values.T)
        if asym > SYMMETRY_TOL * scale:
            raise ValidationError(f"kernel is not symmetric (asymmetry {asym:.3e})", contract="kernel-symmetry")
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def size(self):
        return self.values.shape[0]

    def eigenvalues(self):
        return scipy.linalg.eigvalsh(self.values)

    def is_psd(self):
        eigs = self.eigenvalues()
        return bool(eigs[0] >= -PSD_TOL * max(abs(eigs[-1]), np.finfo(float).tiny))


@dataclass(frozen=True, eq=False)
class Standardizer:
    """Per-feature centering and scaling fitted on training instances"""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, values):
        mean = values.mean(axis=1)
        scale = values.std(axis=1)
        scale[scale == 0.0] = 1.0
        return cls(mean, scale)

    def apply(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            return (values - self.mean) / self.scale
        return (values - self.mean[:, None]) / self.scale[:, None]


@dataclass(frozen=True, eq=False)
class LseModel:
    hyper: Hyperparams
    code: np.ndarray
    encoders: tuple
    modality_names: tuple
    eigenvalues: np.ndarray
    modality_kinds: tuple = ()
    standardizers: dict = field(default_factory=dict)
    warnings: tuple = ()

    def __post_init__(self):
        d, n = self.code.shape
        if d != self.hyper.latent_dim:
            raise ValidationError(f"code has {d} rows but latent_dim is {self.hyper.latent_dim}", contract="code-shape")
        if len(self.encoders) != len(self.modality_names):
            raise ValidationError("one encoder per modality is required", contract="encoder-count")
        for name, u in zip(self.modality_names, self.encoders):
            if u.shape[0] != d:
                raise ValidationError(f"encoder {name} has {u.shape[0]} rows, expected {d}", contract="encoder-shape")
        if len(self.eigenvalues) != d:
            raise ValidationError(f"{len(self.eigenvalues)} eigenvalues for latent_dim {d}", contract="eigenvalue-count")
        if np.any(np.diff(self.eigenvalues) > 0):
            raise ValidationError("eigenvalues must be sorted in descending order", contract="eigenvalue-order")
        gram = self.code @ self.code.T
        err = np.max(np.abs(gram - np.eye(d)))
        if err > ORTHONORMAL_TOL:
            raise NumericalError(f"code rows are not orthonormal (max error {err:.3e})", contract="orthonormal-code")
        if not self.modality_kinds:
            object.__setattr__(self, 'modality_kinds', tuple("visual" if i == 0 else "semantic"
                                                             for i in range(len(self.modality_names))))

    @property
    def n_train(self):
        return self.code.shape[1]

    def encoder(self, name):
        try:
            return self.encoders[self.modality_names.index(name)]
        except ValueError:
            raise ValidationError(f"unknown modality {name!r}; model has {list(self.modality_names)}", contract="modality-name")

    def dim(self, name):
        return self.encoder(name).shape[1]

    def prepare(self, name, values):
        """Apply the training-time feature transform of modality name"""
        standardizer = self.standardizers.get(name)
        values = np.asarray(values, dtype=np.float64)
        return standardizer.apply(values) if standardizer is not None else values

    def encode(self, name, values):
        """Latent codes U X for feature columns of modality name"""
        return self.encoder(name) @ self.prepare(name, values)

    def describe(self):
        return {
            "lambda": self.hyper.lam,
            "latent_dim": self.hyper.latent_dim,
            "standardize": self.hyper.standardize,
            "solver": self.hyper.solver,
            "train_instances": self.n_train,
            "modalities": [{"name": n, "kind": k, "dim": int(u.shape[1])}
                           for n, k, u in zip(self.modality_names, self.modality_kinds, self.encoders)],
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "warnings": list(self.warnings),
        }


def _values(x):
    return x.values if isinstance(x, ModalityMatrix) else np.asarray(x, dtype=np.float64)


def _check_lambda(lam):
    if not (0.0 <= lam < 1.0):
        raise ValidationError(f"lambda must satisfy 0 <= lambda < 1, got {lam}", contract="lambda-range")


def ridge_factor(x, lam):
    """Cholesky factor of lam X X^T + (1 - lam) I (an F x F system)"""
    _check_lambda(lam)
    values = _values(x)
    system = lam * (values @ values.T)
    system[np.diag_indices_from(system)] += 1.0 - lam
    try:
        return scipy.linalg.cho_factor(system, lower=True, check_finite=False)
    except np.linalg.LinAlgError as e:
        cond = float(np.linalg.cond(system))
        raise NumericalError(f"ridge system is numerically singular: {e}", contract="ridge-system",
                             diagnostics={"condition_estimate": cond})


def compute_delta(x, lam, factor=None):
    """Kernel Delta = X^T (lam X X^T + (1 - lam) I)^-1 X"""
    values = _values(x)
    if factor is None:
        factor = ridge_factor(values, lam)
    delta = values.T @ scipy.linalg.cho_solve(factor, values, check_finite=False)
    return KernelMatrix(0.5 * (delta + delta.T))


def aggregate_kernels(deltas):
    """Entrywise sum Omega, accumulated in list order"""
    deltas = list(deltas)
    if not deltas:
        raise ValidationError("aggregate_kernels needs at least one kernel", contract="kernel-list")
    sizes = {k.size for k in deltas}
    if len(sizes) != 1:
        raise ValidationError(f"kernel size mismatch: {sorted(sizes)}", contract="kernel-size")
    omega = np.zeros_like(deltas[0].values)
    for k in deltas:
        omega += k.values
    return KernelMatrix(omega)


def fix_signs(vectors):
    """Flip each column so that its largest-magnitude entry is positive"""
    vectors = np.array(vectors, dtype=np.float64, copy=True)
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _dense_top(omega, d):
    try:
        eigenvalues, eigenvectors = scipy.linalg.eigh(omega, check_finite=False)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"dense eigensolver failed: {e}", contract="eigensolver")
    return eigenvalues[::-1][:d], eigenvectors[:, ::-1][:, :d]


def _iterative_top(omega, d):
    n = omega.shape[0]
    if d >= n - 1:
        # ARPACK needs k < n - 1 for a well-posed Lanczos run
        return _dense_top(omega, d)
    v0 = np.full(n, 1.0 / np.sqrt(n))
    try:
        eigenvalues, eigenvectors = scipy.sparse.linalg.eigsh(omega, k=d, which='LA', v0=v0, tol=0.0)
    except scipy.sparse.linalg.ArpackNoConvergence as e:
        raise NumericalError(f"iterative eigensolver did not converge: {e}", contract="eigensolver",
                             diagnostics={"requested": d, "converged": len(e.eigenvalues)})
    order = np.argsort(eigenvalues)[::-1]
    return eigenvalues[order], eigenvectors[:, order]


def rank_warnings(eigenvalues):
    """Warnings for retained eigenvalues that are numerically zero"""
    eigenvalues = np.asarray(eigenvalues)
    top = max(float(eigenvalues[0]), 0.0) if eigenvalues.size else 0.0
    null = int(np.sum(eigenvalues <= RANK_TOL * max(top, 1.0)))
    if null:
        return [f"latent dimension exceeds rank of the aggregate kernel: {null} of {eigenvalues.size} "
                f"retained eigenvalues are numerically zero"]
    return []


def solve_latent_codes(omega, d, solver="dense"):
    """
    Top-d eigenvectors of Omega as the rows of the code matrix

    Returns:
        tuple: (code d x N with orthonormal rows, eigenvalues in descending order)
    """
    values = omega.values if isinstance(omega, KernelMatrix) else np.asarray(omega, dtype=np.float64)
    n = values.shape[0]
    if not (1 <= int(d) <= n):
        raise ValidationError(f"latent dimension must satisfy 1 <= d <= N={n}, got {d}", contract="latent-dim")
    d = int(d)
    if solver == "dense":
        eigenvalues, eigenvectors = _dense_top(values, d)
    elif solver == "iterative":
        eigenvalues, eigenvectors = _iterative_top(values, d)
    else:
        raise ValidationError(f"unknown solver {solver!r}", contract="solver")
    code = np.ascontiguousarray(fix_signs(eigenvectors).T)
    return code, np.array(eigenvalues, dtype=np.float64)


def derive_encoder(code, x, lam, factor=None):
    """Closed-form U = C X^T (lam X X^T + (1 - lam) I)^-1, shape d x F"""
    values = _values(x)
    if code.shape[1] != values.shape[1]:
        raise ValidationError(f"code has {code.shape[1]} columns but the modality has {values.shape[1]} instances",
                              contract="instance-count")
    if factor is None:
        factor = ridge_factor(values, lam)
    return scipy.linalg.cho_solve(factor, values @ code.T, check_finite=False).T


def reconstruction_objective(x, code, u, lam):
    """(1 - lam) ||X - U^T C||^2 + lam ||C - U X||^2"""
    values = _values(x)
    return ((1.0 - lam) * np.linalg.norm(values - u.T @ code) ** 2
            + lam * np.linalg.norm(code - u @ values) ** 2)


def kernel_objective(code, delta):
    """Tr[C Delta C^T]"""
    values = delta.values if isinstance(delta, KernelMatrix) else delta
    return float(np.trace(code @ values @ code.T))


def stationarity_residual(code, u, x, lam):
    """Relative Frobenius error of (1-lam) C C^T U + lam U X X^T = C X^T"""
    values = _values(x)
    rhs = code @ values.T
    lhs = (1.0 - lam) * (code @ code.T @ u) + lam * (u @ values @ values.T)
    return float(np.linalg.norm(lhs - rhs) / max(np.linalg.norm(rhs), np.finfo(float).tiny))


def _training_matrices(dataset, modalities, standardize):
    names = list(modalities) if modalities else dataset.modality_names
    if dataset.visual.name not in names:
        names = [dataset.visual.name] + names
    matrices, standardizers = [], {}
    for name in names:
        m = dataset.modality(name)
        values = m.values
        if standardize:
            standardizers[name] = Standardizer.fit(values)
            values = standardizers[name].apply(values)
        matrices.append((m, values))
    return matrices, standardizers


def _check_training_set(dataset):
    classes = dataset.labels.classes()
    outside = sorted(set(classes) - set(dataset.split.seen))
    if outside:
        raise ValidationError(f"training instances must come from seen classes; found classes {outside}",
                              contract="seen-only training")
    if len(classes) < 2:
        raise ValidationError(f"training needs >= 2 distinct seen classes, found {len(classes)}", contract="seen-classes")


def _kernels(matrices, lam, threads):
    def one(item):
        factor = ridge_factor(item[1], lam)
        return factor, compute_delta(item[1], lam, factor)
    if threads > 1 and len(matrices) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, matrices))
    return [one(item) for item in matrices]


def train_path(dataset, lam, dims, standardize=False, solver="dense", modalities=None, threads=1):
    """
    Train one model per latent dimension in dims from a single eigendecomposition

    The models for smaller d use the leading rows of the largest code matrix,
    so train_path(ds, lam, [d])[0] equals train(ds, Hyperparams(lam, d)).
    """
    if not dims:
        raise ValidationError("dims must be non-empty", contract="dim-grid")
    hypers = [Hyperparams(lam, d, standardize, solver) for d in dims]
    _check_training_set(dataset)
    n = dataset.n_instances
    too_big = [h.latent_dim for h in hypers if h.latent_dim > n]
    if too_big:
        raise ValidationError(f"latent dimension {too_big} exceeds N={n} training instances", contract="latent-dim")
    matrices, standardizers = _training_matrices(dataset, modalities, standardize)
    started = time.perf_counter()
    kernels = _kernels(matrices, lam, threads)
    omega = aggregate_kernels([k for _, k in kernels])
    d_max = max(h.latent_dim for h in hypers)
    code_full, eig_full = solve_latent_codes(omega, d_max, solver)
    models = []
    for hyper in hypers:
        d = hyper.latent_dim
        code = np.ascontiguousarray(code_full[:d])
        eigenvalues = eig_full[:d].copy()
        encoders = tuple(derive_encoder(code, values, lam, factor)
                         for (_, values), (factor, _) in zip(matrices, kernels))
        warnings = tuple(rank_warnings(eigenvalues))
        for w in warnings:
            logger.warning(w)
        models.append(LseModel(hyper, code, encoders, tuple(m.name for m, _ in matrices), eigenvalues,
                               tuple(m.kind for m, _ in matrices), dict(standardizers), warnings))
    logger.info(f"Trained {len(models)} model(s) on {n} instances, lambda={lam}, dims={list(dims)} "
                f"in {time.perf_counter() - started:.3f}s")
    return models


def train(dataset, hyper, modalities=None, threads=1):
    """Fit an LseModel on (seen-class) training instances"""
    return train_path(dataset, hyper.lam, [hyper.latent_dim], hyper.standardize, hyper.solver,
                      modalities, threads)[0]


def fast_compact(dataset, classes=None):
    """
    One instance per class: visual columns become per-class means and semantic
    columns the class prototypes. Labels are the class ids in ascending order.
    """
    present = dataset.labels.classes()
    classes = sorted(int(c) for c in (present if classes is None else classes))
    empty = [c for c in classes if c not in present]
    if empty:
        raise ValidationError(f"empty class: no instances for classes {empty}", contract="empty class")
    labels = dataset.labels.labels
    members = [np.flatnonzero(labels == c) for c in classes]
    modalities = []
    for m in dataset.modalities:
        if m.kind == "semantic":
            values = dataset.prototypes_for(m.name).columns_for(classes)
        else:
            values = np.column_stack([m.values[:, idx].mean(axis=1) for idx in members])
        modalities.append(ModalityMatrix(m.name, values, m.kind))
    return Dataset(tuple(modalities), LabelVector(classes), dataset.split, dataset.prototypes, dataset.class_names)


def training_view(dataset, fast=False, classes=None):
    """Seen-class training instances, compacted per class when fast is set"""
    seen = list(dataset.split.seen) if classes is None else list(classes)
    train_set = dataset.subset(dataset.indices_of(seen))
    if fast:
        train_set = fast_compact(train_set, seen)
    return train_set


class TrainingService(BaseService):
    """Handler for model training and inspection"""

    def train(self, manifest, lam, dim, out, standardize=False, fast=False, solver="dense", modalities=None):
        """Train on the seen classes of a manifest and write the model container"""
        from .modelstore import save_model

        def run():
            hyper = Hyperparams(lam, dim, standardize, solver)
            train_set = training_view(assemble_dataset(manifest), fast)
            model = train(train_set, hyper, modalities, self.threads)
            save_model(model, out)
            return {"model": str(out), "summary": model.describe()}
        return self._run(f"training model from {manifest}", run)

    def inspect(self, model_path):
        """Report model metadata: lambda, d, eigenvalue spectrum, modality dims"""
        from .modelstore import load_model
        return self._run(f"inspecting model {model_path}", lambda: {"summary": load_model(model_path).describe()})
