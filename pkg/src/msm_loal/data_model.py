"""Longitudinal data container, treatment patterns, pooled designs and fusion graphs.

Times are 0-based. Covariate block ``L_t`` is measured before treatment ``A_t``;
an optional extra block after the last treatment is allowed. Censoring
indicators ``C_t`` exist for ``t = 1..n_censor`` and ``C_t = 1`` means the
subject was lost by time ``t``. Under that convention ``L_t`` is observed for
subjects with ``C_{t-1} = 0`` and ``A_t`` for subjects with ``C_t = 0``.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

INTERCEPT = -1
TREATMENT = -2

_KIND_ORDER = {INTERCEPT: 0, TREATMENT: 2}


class ValidationError(ValueError):
    """Raised when input data violate the dataset contract."""


@dataclass(frozen=True)
class CoefIndex:
    """Position of one coefficient in a pooled model.

    ``block`` is the source time of a covariate, ``INTERCEPT`` for the
    per-time intercept or ``TREATMENT`` for a past-treatment term, in which
    case ``k`` is the treatment time.
    """

    tau: int
    block: int
    k: int

    @property
    def kind(self) -> str:
        if self.block == INTERCEPT:
            return "intercept"
        if self.block == TREATMENT:
            return "treatment"
        return "covariate"

    def sort_key(self) -> tuple:
        return (self.tau, _KIND_ORDER.get(self.block, 1), self.block, self.k)


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    """Wide-format longitudinal data for ``n`` subjects.

    Parameters
    ----------
    covariates : sequence of (n, p_t) arrays
        One block per time. There are either ``T + 1`` or ``T + 2`` blocks.
    covariate_names : sequence of sequences of str
        Column names per block, unique across blocks.
    treatments : (n, T + 1) array
        Binary treatments; NaN where the subject is censored.
    outcome : (n,) array
        Terminal outcome; NaN allowed for censored subjects.
    censoring : (n, n_censor) array, optional
        Column ``j`` holds ``C_{j+1}``.
    baseline_modifier : int, optional
        Column of block 0 used as the baseline effect modifier.
    monotone_treatment : bool
        Treatment is an initiation indicator (nondecreasing in time).
    families : sequence of sequences of str, optional
        Variable label per column; columns sharing a label across blocks are
        repeated measurements of one time-varying variable. Defaults to the
        column names with no sharing.
    """

    covariates: tuple
    covariate_names: tuple
    treatments: np.ndarray
    outcome: np.ndarray
    censoring: np.ndarray | None = None
    baseline_modifier: int | None = None
    monotone_treatment: bool = False
    families: tuple | None = None

    def __post_init__(self):
        blocks = tuple(np.ascontiguousarray(b, dtype=float) for b in self.covariates)
        blocks = tuple(b.reshape(b.shape[0], -1) if b.ndim == 1 else b for b in blocks)
        names = tuple(tuple(str(s) for s in nm) for nm in self.covariate_names)
        A = np.asarray(self.treatments, dtype=float)
        if A.ndim == 1:
            A = A[:, None]
        Y = np.asarray(self.outcome, dtype=float).ravel()
        C = None
        if self.censoring is not None:
            C = np.asarray(self.censoring, dtype=float)
            if C.ndim == 1:
                C = C[:, None]
            if C.shape[1] == 0:
                C = None
        fams = self.families
        if fams is None:
            fams = names
        fams = tuple(tuple(str(s) for s in f) for f in fams)
        object.__setattr__(self, "covariates", blocks)
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "treatments", A)
        object.__setattr__(self, "outcome", Y)
        object.__setattr__(self, "censoring", C)
        object.__setattr__(self, "families", fams)
        for arr in (A, Y, *blocks) + ((C,) if C is not None else ()):
            arr.setflags(write=False)
        self._validate()

    def _validate(self):
        n = self.outcome.shape[0]
        n_a = self.treatments.shape[1]
        if self.treatments.shape[0] != n:
            raise ValidationError("treatments and outcome have different row counts")
        if not n_a <= len(self.covariates) <= n_a + 1:
            raise ValidationError(
                f"{len(self.covariates)} covariate blocks for {n_a} treatment times; "
                "expected T+1 or T+2"
            )
        if len(self.covariate_names) != len(self.covariates):
            raise ValidationError("one name list is required per covariate block")
        if len(self.families) != len(self.covariates):
            raise ValidationError("one family list is required per covariate block")
        seen = set()
        for t, (b, nm, fam) in enumerate(zip(self.covariates, self.covariate_names, self.families)):
            if b.shape[0] != n:
                raise ValidationError(f"covariate block {t} has {b.shape[0]} rows, expected {n}")
            if len(nm) != b.shape[1] or len(fam) != b.shape[1]:
                raise ValidationError(f"covariate block {t}: names do not match column count")
            for s in nm:
                if s in seen:
                    raise ValidationError(f"duplicate covariate name {s!r}")
                seen.add(s)
        for t in range(n_a):
            if f"A{t}" in seen:
                raise ValidationError(f"covariate name A{t} is reserved for treatments")
        C = self.censoring
        if C is not None:
            if C.shape[0] != n:
                raise ValidationError("censoring has wrong row count")
            if C.shape[1] > len(self.covariates) - 1:
                raise ValidationError("more censoring times than covariate blocks allow")
            if not np.all(np.isin(C, (0.0, 1.0))):
                raise ValidationError("censoring indicators must be 0/1")
            if np.any(np.diff(C, axis=1) < 0):
                raise ValidationError("censoring must be monotone per subject")
        for t in range(len(self.covariates)):
            rows = self.at_risk(t - 1) if t > 0 else np.ones(n, bool)
            if np.isnan(self.covariates[t][rows]).any():
                raise ValidationError(f"covariate block {t} has NaN among uncensored rows")
        A = self.treatments
        for t in range(n_a):
            obs = A[self.at_risk(t), t]
            if not np.all(np.isin(obs, (0.0, 1.0))):
                raise ValidationError(f"treatment A{t} must be 0/1 for uncensored subjects")
        if self.monotone_treatment and n_a > 1:
            for t in range(1, n_a):
                r = self.at_risk(t)
                if np.any(A[r, t] < A[r, t - 1]):
                    raise ValidationError("monotone_treatment set but A decreases over time")
        if np.isnan(self.outcome[self.at_risk(self.n_blocks - 1)]).any():
            raise ValidationError("outcome missing for an uncensored subject")
        if self.baseline_modifier is not None:
            if not 0 <= self.baseline_modifier < self.covariates[0].shape[1]:
                raise ValidationError("baseline_modifier is not a column of block 0")

    @property
    def n(self) -> int:
        return self.outcome.shape[0]

    @property
    def T(self) -> int:
        return self.treatments.shape[1] - 1

    @property
    def n_blocks(self) -> int:
        return len(self.covariates)

    @property
    def n_censor(self) -> int:
        return 0 if self.censoring is None else self.censoring.shape[1]

    @property
    def modifier(self) -> np.ndarray | None:
        if self.baseline_modifier is None:
            return None
        return self.covariates[0][:, self.baseline_modifier]

    def censored(self, t: int) -> np.ndarray:
        """Boolean mask of subjects lost by time ``t`` (never at t <= 0)."""
        if t <= 0 or self.censoring is None:
            return np.zeros(self.n, bool)
        return self.censoring[:, min(t, self.n_censor) - 1] == 1

    def at_risk(self, t: int) -> np.ndarray:
        return ~self.censored(t)

    def history(self, t: int) -> np.ndarray:
        """Covariate blocks ``0..t`` as one matrix."""
        return np.hstack(self.covariates[: t + 1])

    def history_names(self, t: int) -> list[str]:
        return [s for nm in self.covariate_names[: t + 1] for s in nm]

    def locate(self, name: str) -> tuple[int, int]:
        for t, nm in enumerate(self.covariate_names):
            if name in nm:
                return t, nm.index(name)
        raise KeyError(name)

    def subset(self, idx: np.ndarray) -> "LongitudinalDataset":
        """Row subset (with repetition allowed) as a new dataset."""
        idx = np.asarray(idx)
        return LongitudinalDataset(
            covariates=tuple(b[idx] for b in self.covariates),
            covariate_names=self.covariate_names,
            treatments=self.treatments[idx],
            outcome=self.outcome[idx],
            censoring=None if self.censoring is None else self.censoring[idx],
            baseline_modifier=self.baseline_modifier,
            monotone_treatment=self.monotone_treatment,
            families=self.families,
        )


@dataclass(frozen=True)
class PatternSpace:
    patterns: np.ndarray
    kind: str

    def __len__(self):
        return self.patterns.shape[0]


def enumerate_patterns(T: int, kind: str = "full") -> PatternSpace:
    """All treatment patterns of length ``T + 1`` in lexicographic order."""
    if T < 0:
        raise ValueError("T must be >= 0")
    if kind == "full":
        pats = np.array(list(itertools.product((0, 1), repeat=T + 1)), dtype=int)
    elif kind == "monotone":
        # k leading zeros followed by ones; lexicographic order runs from
        # all zeros to all ones
        pats = np.array([[0] * k + [1] * (T + 1 - k) for k in range(T + 1, -1, -1)], dtype=int)
    else:
        raise ValueError(f"unknown pattern kind {kind!r}")
    pats.setflags(write=False)
    return PatternSpace(pats, kind)


def default_patterns(dataset: LongitudinalDataset) -> PatternSpace:
    return enumerate_patterns(dataset.T, "monotone" if dataset.monotone_treatment else "full")


@dataclass(frozen=True, eq=False)
class TimeBlock:
    """Rows and columns contributed by one model time.

    ``X_local`` has one row per subject (all subjects, NaN allowed outside
    the risk set) and one column per entry of ``columns``.
    """

    tau: int
    columns: np.ndarray
    risk: np.ndarray
    X_local: np.ndarray
    y_local: np.ndarray


@dataclass(frozen=True, eq=False)
class PooledDesign:
    """Stacked design of a pooled logistic model stratified by time."""

    X: np.ndarray
    y: np.ndarray
    row_time: np.ndarray
    row_subject: np.ndarray
    columns: tuple
    column_names: tuple
    unpenalized_mask: np.ndarray
    families: tuple
    blocks: tuple
    kind: str
    n_subjects: int
    _lookup: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._lookup.update({c: j for j, c in enumerate(self.columns)})

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_cols(self) -> int:
        return self.X.shape[1]

    def index(self, c: CoefIndex) -> int:
        return self._lookup[c]

    def linear_predictor(self, coef: np.ndarray) -> list[np.ndarray]:
        """Per-model-time linear predictor for every subject."""
        coef = np.asarray(coef, float)
        return [b.X_local @ coef[b.columns] for b in self.blocks]


def _assemble(entries, kind, n, families_of) -> PooledDesign:
    # entries: list of (tau, [(CoefIndex, name, column n-vector)], risk, y)
    cols = sorted({c for _, items, _, _ in entries for c, _, _ in items}, key=CoefIndex.sort_key)
    lookup = {c: j for j, c in enumerate(cols)}
    names = {}
    blocks = []
    rows_X, rows_y, rows_t, rows_s = [], [], [], []
    P = len(cols)
    for tau, items, risk, y in entries:
        idx = np.array([lookup[c] for c, _, _ in items], dtype=np.intp)
        local = np.column_stack([v for _, _, v in items]) if items else np.zeros((n, 0))
        for c, nm, _ in items:
            names[c] = nm
        sub = np.flatnonzero(risk)
        Xt = np.zeros((sub.size, P))
        Xt[:, idx] = local[sub]
        rows_X.append(Xt)
        rows_y.append(y[sub])
        rows_t.append(np.full(sub.size, tau))
        rows_s.append(sub)
        local.setflags(write=False)
        blocks.append(TimeBlock(tau, idx, risk, local, y))
    X = np.vstack(rows_X) if rows_X else np.zeros((0, P))
    unpen = np.array([c.block in (INTERCEPT, TREATMENT) for c in cols], dtype=bool)
    for arr in (X, unpen):
        arr.setflags(write=False)
    return PooledDesign(
        X=X,
        y=np.concatenate(rows_y),
        row_time=np.concatenate(rows_t),
        row_subject=np.concatenate(rows_s),
        columns=tuple(cols),
        column_names=tuple(names[c] for c in cols),
        unpenalized_mask=unpen,
        families=tuple(families_of(c) for c in cols),
        blocks=tuple(blocks),
        kind=kind,
        n_subjects=n,
    )


def _family_fn(dataset):
    def fam(c: CoefIndex):
        if c.block == INTERCEPT:
            return "(Intercept)"
        if c.block == TREATMENT:
            return f"A{c.k}"
        return dataset.families[c.block][c.k]

    return fam


def _history_items(dataset, tau, prefix, n_treat):
    n = dataset.n
    items = [(CoefIndex(tau, INTERCEPT, 0), f"{prefix}~(Intercept)", np.ones(n))]
    for b in range(tau + 1):
        blk = dataset.covariates[b]
        for k, nm in enumerate(dataset.covariate_names[b]):
            items.append((CoefIndex(tau, b, k), f"{prefix}~{nm}", blk[:, k]))
    for s in range(n_treat):
        items.append((CoefIndex(tau, TREATMENT, s), f"{prefix}~A{s}", dataset.treatments[:, s]))
    return items


def build_pooled_treatment_design(dataset: LongitudinalDataset) -> PooledDesign:
    """Pooled treatment model with one intercept and covariate set per time."""
    entries = []
    for tau in range(dataset.T + 1):
        risk = dataset.at_risk(tau).copy()
        n_treat = tau
        if dataset.monotone_treatment:
            n_treat = 0
            if tau > 0:
                risk &= dataset.treatments[:, tau - 1] == 0
        items = _history_items(dataset, tau, f"A{tau}", n_treat)
        entries.append((tau, items, risk, dataset.treatments[:, tau]))
    return _assemble(entries, "treatment", dataset.n, _family_fn(dataset))


def build_pooled_censoring_design(dataset: LongitudinalDataset) -> PooledDesign:
    """Pooled model for ``C_tau`` among subjects still observed at ``tau - 1``."""
    if dataset.censoring is None:
        raise ValidationError("dataset has no censoring indicators")
    entries = []
    for tau in range(1, dataset.n_censor + 1):
        risk = dataset.at_risk(tau - 1).copy()
        items = _history_items(dataset, tau, f"C{tau}", min(tau, dataset.T + 1))
        entries.append((tau, items, risk, dataset.censoring[:, tau - 1]))
    return _assemble(entries, "censoring", dataset.n, _family_fn(dataset))


@dataclass(frozen=True)
class PenaltyGraph:
    """Undirected edges between design column indices, stored with u < v."""

    edges: tuple
    kind: str = "clique"

    def __len__(self):
        return len(self.edges)

    def restrict(self, keep: np.ndarray) -> "PenaltyGraph":
        return PenaltyGraph(tuple((u, v) for u, v in self.edges if keep[u] and keep[v]), self.kind)


def make_fusion_graph(design: PooledDesign, kind: str = "clique") -> PenaltyGraph:
    """Fusion edges between coefficients of the same variable in different models.

    ``clique`` links equal (block, k) across all model times, ``chain`` only
    successive model times. ``lagged_clique`` links repeated measurements of
    a time-varying variable that enter at the same lag ``tau - block``, and
    treats variables measured only once as in ``clique``.
    """
    if kind not in ("clique", "chain", "lagged_clique"):
        raise ValueError(f"unknown graph kind {kind!r}")
    pen = [j for j in range(design.n_cols) if not design.unpenalized_mask[j]]
    blocks_of = {}
    for j in pen:
        blocks_of.setdefault(design.families[j], set()).add(design.columns[j].block)
    groups: dict = {}
    for j in pen:
        c = design.columns[j]
        fam = design.families[j]
        if kind == "lagged_clique" and len(blocks_of[fam]) > 1:
            key = ("lag", fam, c.tau - c.block)
        else:
            key = ("same", c.block, c.k)
        groups.setdefault(key, []).append(j)
    edges = set()
    for members in groups.values():
        members = sorted(members, key=lambda j: design.columns[j].tau)
        if kind == "chain":
            taus = [design.columns[j].tau for j in members]
            for a, b, ta, tb in zip(members, members[1:], taus, taus[1:]):
                if tb == ta + 1:
                    edges.add((min(a, b), max(a, b)))
        else:
            for a, b in itertools.combinations(members, 2):
                edges.add((min(a, b), max(a, b)))
    return PenaltyGraph(tuple(sorted(edges)), kind)


def read_long_csv(csv_path: str | Path, sidecar: str | Path | dict) -> LongitudinalDataset:
    """Build a dataset from one-row-per-subject-time CSV data.

    The sidecar (a JSON file or dict) lists ``baseline`` covariates, read
    from each subject's time-0 row, and ``time_varying`` covariates, read
    at every time. Optional keys are ``baseline_modifier`` (a baseline
    column name) and ``monotone_treatment``. Treatment column ``A`` is blank
    after the last treatment time and censoring column ``C`` is blank at
    time 0. ``Y`` is read from the last non-blank value per subject.
    """
    if isinstance(sidecar, dict):
        meta = sidecar
    else:
        meta = json.loads(Path(sidecar).read_text())
    baseline = list(meta.get("baseline", []))
    varying = list(meta.get("time_varying", []))
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)
    need = ["id", "time", "A", "Y"] + baseline + varying
    missing = [c for c in need if c not in header]
    if missing:
        raise ValidationError(f"CSV lacks columns {missing}")
    has_c = "C" in header

    def num(s):
        s = (s or "").strip()
        if s == "" or s.upper() == "NA" or s.lower() == "nan":
            return np.nan
        try:
            return float(s)
        except ValueError as exc:
            raise ValidationError(f"non-numeric value {s!r}") from exc

    ids = []
    pos = {}
    for r in rows:
        if r["id"] not in pos:
            pos[r["id"]] = len(ids)
            ids.append(r["id"])
    times = sorted({int(num(r["time"])) for r in rows})
    if times != list(range(len(times))):
        raise ValidationError("times must be 0, 1, ..., K without gaps")
    n, K = len(ids), len(times)
    cov = np.full((n, K, len(varying)), np.nan)
    base = np.full((n, len(baseline)), np.nan)
    A = np.full((n, K), np.nan)
    C = np.full((n, K), np.nan)
    Y = np.full(n, np.nan)
    for r in rows:
        i, t = pos[r["id"]], int(num(r["time"]))
        cov[i, t] = [num(r[c]) for c in varying]
        if t == 0:
            base[i] = [num(r[c]) for c in baseline]
        A[i, t] = num(r["A"])
        if has_c:
            C[i, t] = num(r["C"])
        y = num(r["Y"])
        if not np.isnan(y):
            Y[i] = y
    n_a = max((t + 1 for t in range(K) if not np.all(np.isnan(A[:, t]))), default=0)
    if n_a == 0:
        raise ValidationError("no treatment values found")
    n_c = 0
    if has_c:
        n_c = max((t for t in range(1, K) if not np.all(np.isnan(C[:, t]))), default=0)
    # a subject with no row at time t was lost by then
    cens = None
    if n_c:
        cens = np.nan_to_num(C[:, 1 : n_c + 1], nan=1.0)
        cens = np.maximum.accumulate(cens, axis=1)
    blocks = [np.column_stack([base, cov[:, 0]])] + [cov[:, t] for t in range(1, K)]
    names = [baseline + [f"{v}_0" for v in varying]] + [[f"{v}_{t}" for v in varying] for t in range(1, K)]
    fams = [baseline + varying] + [varying for _ in range(1, K)]
    mod = meta.get("baseline_modifier")
    return LongitudinalDataset(
        covariates=tuple(blocks),
        covariate_names=tuple(names),
        treatments=A[:, :n_a],
        outcome=Y,
        censoring=cens,
        baseline_modifier=None if mod is None else names[0].index(mod),
        monotone_treatment=bool(meta.get("monotone_treatment", False)),
        families=tuple(fams),
    )


def write_long_csv(dataset: LongitudinalDataset, path: str | Path, n_baseline: int | None = None) -> dict:
    """Write ``dataset`` in long format and return a matching sidecar dict.

    ``n_baseline`` leading columns of block 0 are written as baseline
    covariates; the remaining block-0 columns must match the later blocks.
    """
    p0 = dataset.covariates[0].shape[1]
    later = [b.shape[1] for b in dataset.covariates[1:]]
    if n_baseline is None:
        n_baseline = p0 - (later[0] if later else 0)
    pv = p0 - n_baseline
    if any(p != pv for p in later):
        raise ValidationError("time-varying blocks must share one layout")
    baseline = list(dataset.covariate_names[0][:n_baseline])
    varying = list(dataset.families[0][n_baseline:])
    K = dataset.n_blocks
    fields = ["id", "time"] + baseline + varying + ["A", "C", "Y"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for i in range(dataset.n):
            for t in range(K):
                if t > 0 and dataset.censored(t - 1)[i]:
                    break
                vals = [i, t]
                vals += [repr(float(v)) for v in dataset.covariates[0][i, :n_baseline]]
                cur = dataset.covariates[t][i, n_baseline:] if t == 0 else dataset.covariates[t][i]
                vals += [repr(float(v)) for v in cur]
                a = dataset.treatments[i, t] if t <= dataset.T else np.nan
                vals.append("" if np.isnan(a) else int(a))
                c = "" if t == 0 or t > dataset.n_censor else int(dataset.censoring[i, t - 1])
                vals.append(c)
                last = t == K - 1 or dataset.censored(t)[i]
                y = dataset.outcome[i]
                vals.append(repr(float(y)) if last and not np.isnan(y) else "")
                w.writerow(vals)
    meta = {"baseline": baseline, "time_varying": varying,
            "monotone_treatment": dataset.monotone_treatment}
    mod = dataset.baseline_modifier
    if mod is not None:
        # time-0 values of a time-varying covariate are read back as "<name>_0"
        meta["baseline_modifier"] = baseline[mod] if mod < n_baseline else f"{dataset.families[0][mod]}_0"
    return meta


def check_columns(names: Sequence[str], design: PooledDesign) -> list[int]:
    lookup = {nm: j for j, nm in enumerate(design.column_names)}
    try:
        return [lookup[nm] for nm in names]
    except KeyError as exc:
        raise ValidationError(f"unknown design column {exc.args[0]!r}") from None
