"""Command-line experiment harness.

Subcommands wire the library into reproducible studies:

    lveval generate --config cfg.json --out DIR [--seed N]
    lveval fit      --config cfg.json --out DIR [--seed N] [--jobs N]
    lveval eval     --config cfg.json --out DIR [--seed N] [--jobs N]
    lveval theory   --config cfg.json --out DIR [--seed N]
    lveval control  --config cfg.json --out DIR [--seed N] [--jobs N]

Every command is deterministic given its config and seed: reruns produce
byte-identical outputs.  Exit codes: 0 success, 2 config error, 3
numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats as sstats

from . import crossdecode, datamodel, hmm, lgssm, metrics
from . import theory as theory_mod
from .datamodel import SpikeDataset, atomic_write_text, dump_json
from .errors import ConfigError, LvevalError, NumericalError
from .rng import substream


# ---------------------------------------------------------------------------
# statistics helpers
# ---------------------------------------------------------------------------

def spearman_one_tailed(x, y, alternative: str) -> tuple[float, float]:
    """Spearman rank correlation with a one-tailed p-value.

    ``alternative`` is "less" (negative association) or "greater".
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size or x.size < 3:
        return float("nan"), float("nan")
    if np.unique(x).size < 2 or np.unique(y).size < 2:
        return float("nan"), float("nan")
    res = sstats.spearmanr(x, y)
    rho, p_two = float(res.statistic), float(res.pvalue)
    if np.isnan(rho):
        return rho, float("nan")
    if alternative == "less":
        p = p_two / 2.0 if rho < 0 else 1.0 - p_two / 2.0
    elif alternative == "greater":
        p = p_two / 2.0 if rho > 0 else 1.0 - p_two / 2.0
    else:
        raise ConfigError(f"unknown alternative {alternative!r}")
    return rho, p


def write_csv(path: str, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_csv_cell(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _csv_cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def columns_of(channels: np.ndarray, covered: np.ndarray) -> np.ndarray:
    """Positions of ``channels`` inside the ascending ``covered`` list."""
    pos = np.searchsorted(covered, channels)
    if (pos >= covered.size).any() or not np.array_equal(covered[pos], channels):
        raise ConfigError("requested channels are not covered by the model")
    return pos


def covered_channels(partition) -> np.ndarray:
    return np.unique(np.concatenate([partition.held_in, partition.held_out]))


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def generate_hmm_experiment(cfg: dict, out_dir: str, seed: int) -> dict:
    t = cfg["teacher"]
    d = cfg["data"]
    teacher = hmm.make_cycle_teacher(
        M=int(t.get("M", 4)),
        epsilon=float(t.get("epsilon", 1e-2)),
        emission_seed=int(t.get("emission_seed", seed + 1)),
        n_neurons=int(t["n_neurons"]),
    )
    S, T = int(d["S"]), int(d["T"])
    _, counts = hmm.sample_hmm(teacher, S, T, seed=seed)
    train, test = datamodel.split_trials(S, int(d["n_train"]), seed=seed)
    part = datamodel.partition_neurons(
        teacher.n_channels,
        (int(d["n_in"]), int(d["n_out"]), int(d["n_kout"])),
        alias_kout=bool(d.get("alias_kout", False)),
        seed=seed,
    )
    ds = SpikeDataset(counts=counts, train_indices=train, test_indices=test, partition=part, seed=seed)
    ds_dir = os.path.join(out_dir, "dataset")
    datamodel.save_dataset(ds, ds_dir, with_csv=bool(cfg.get("export_csv", False)))
    teacher_path = os.path.join(out_dir, "teacher.json")
    hmm.save_model(teacher, teacher_path)
    graph = hmm.traffic_graph(
        teacher, n_trials=int(cfg.get("graph_trials", 2000)), T=T, seed=seed,
        threshold=float(cfg.get("graph_threshold", 0.01)),
    )
    atomic_write_text(os.path.join(out_dir, "teacher.dot"), graph.to_dot())
    return {"dataset_dir": ds_dir, "teacher_path": teacher_path}


def generate_lgssm_experiment(cfg: dict, out_dir: str, seed: int) -> dict:
    t = cfg["teacher"]
    d = cfg["data"]
    teacher = lgssm.make_random_teacher(
        M=int(t.get("M", 4)), N=int(t["n_neurons"]), seed=int(t.get("teacher_seed", seed + 1))
    )
    S, T = int(d["S"]), int(d["T"])
    _, obs = lgssm.sample_lgssm(teacher, S, T, seed=seed)
    train, test = datamodel.split_trials(S, int(d["n_train"]), seed=seed)
    part = datamodel.partition_neurons(
        teacher.n_channels,
        (int(d["n_in"]), int(d["n_out"]), int(d["n_kout"])),
        alias_kout=bool(d.get("alias_kout", False)),
        seed=seed,
    )
    ds = SpikeDataset(counts=obs, train_indices=train, test_indices=test, partition=part,
                      seed=seed, real_valued=True)
    ds_dir = os.path.join(out_dir, "dataset")
    datamodel.save_dataset(ds, ds_dir)
    teacher_path = os.path.join(out_dir, "teacher.json")
    lgssm.save_model(teacher, teacher_path)
    return {"dataset_dir": ds_dir, "teacher_path": teacher_path}


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def student_grid(cfg: dict) -> list[tuple[str, int, int]]:
    ids = []
    for M in cfg.get("M_values", list(range(4, 13))):
        for r in range(int(cfg.get("restarts", 3))):
            ids.append((f"student_M{M}_r{r}", int(M), r))
    return ids


def fit_hmm_students(dataset: SpikeDataset, cfg: dict, seed: int, jobs: int = 1) -> dict:
    """EM-fit one student per (M, restart) on the covered channels."""
    cov = covered_channels(dataset.partition)
    X = dataset.train_counts()[:, :, cov]
    n_iters = int(cfg.get("n_iters", 60))
    grid = student_grid(cfg)

    def fit_one(item):
        model_id, M, r = item
        init = substream(seed, "student-init", hash_id(model_id)).integers(0, 2**63 - 1)
        model, trace = hmm.fit_em(X, M=M, n_iters=n_iters, init_seed=int(init))
        return model_id, model, trace

    results = _jobs_map(fit_one, grid, jobs)
    return {mid: (model, trace) for mid, model, trace in results}


def fit_lgssm_students(dataset: SpikeDataset, cfg: dict, seed: int, jobs: int = 1) -> dict:
    cov = covered_channels(dataset.partition)
    X = dataset.train_counts()[:, :, cov]
    n_iters = int(cfg.get("n_iters", 50))
    grid = student_grid(cfg)

    def fit_one(item):
        model_id, M, r = item
        init = substream(seed, "student-init", hash_id(model_id)).integers(0, 2**63 - 1)
        model, trace = lgssm.fit_em(X, M=M, n_iters=n_iters, init_seed=int(init))
        return model_id, model, trace

    results = _jobs_map(fit_one, grid, jobs)
    return {mid: (model, trace) for mid, model, trace in results}


def hash_id(model_id: str) -> int:
    return int.from_bytes(hashlib.sha256(model_id.encode()).digest()[:4], "little")


def _jobs_map(fn, items, jobs):
    if jobs <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

@dataclass
class EvalRow:
    model_id: str
    M: int
    q: float
    qk_mean: float
    qk_sem: float
    loglik_test: float
    d_s_to_t: float
    d_t_to_s: float
    cycle_d: float
    n_failed: int = 0
    cd_col_avg: float = float("nan")
    score_kind: str = "bits_per_spike"


def eval_hmm_study(
    dataset: SpikeDataset,
    teacher: hmm.HmmModel,
    students: dict[str, hmm.HmmModel],
    metrics_cfg: dict,
    seed: int,
    jobs: int = 1,
) -> dict:
    """Score the teacher and every student; cross-decode the filtered set.

    Returns {"rows": [EvalRow...], "teacher_row": EvalRow, "filtered":
    [ids], "cd_matrix": CrossDecodeMatrix | None, "reports": {...}}.
    """
    part = dataset.partition
    held_in, held_out, k_out = part.held_in, part.held_out, part.k_out
    test_idx = dataset.test_indices
    X_in = dataset.counts[:, :, held_in]
    X_out_test = dataset.counts[test_idx][:, :, held_out]
    null_out = dataset.train_counts()[:, :, held_out].astype(np.float64).mean(axis=(0, 1))
    k = int(metrics_cfg.get("k", 2))
    plan = datamodel.build_kshot_plan(dataset, k=k, seed=seed)
    fs_spec = metrics.FewShotRegressorSpec(
        family=metrics_cfg.get("regressor", "bernoulli-mle"),
        l2_alpha=float(metrics_cfg.get("alpha", 1e-3)),
    )
    family = metrics_cfg.get("family", "bernoulli")

    teacher_cov = np.arange(teacher.n_channels)
    entries = [("teacher", teacher, teacher_cov)]
    cov = covered_channels(part)
    for mid in sorted(students):
        entries.append((mid, students[mid], cov))

    def eval_one(entry):
        mid, model, model_cov = entry
        enc = model.restrict(columns_of(held_in, model_cov))
        post, _ = hmm.posterior_batch(enc, X_in)
        xi = post.xi
        R_out = hmm.predict_rates(model.B, _test_posterior(post, test_idx), columns_of(held_out, model_cov))
        q = metrics.cosmoothing_q(R_out, X_out_test, null_out, family, channel_ids=held_out)
        report = metrics.fewshot_cosmoothing(xi, dataset, plan, fs_spec, family)
        cyc = crossdecode.cycle_consistency(
            xi[test_idx].reshape(-1, xi.shape[2]), R_out.reshape(-1, R_out.shape[2]), model_id=mid
        )
        ll = float(post.trial_logliks[test_idx].mean())
        return mid, model, xi, q, report, cyc, ll

    results = _jobs_map(eval_one, entries, jobs)
    results.sort(key=lambda r: (r[0] != "teacher", r[0]))

    xi_test_flat = {}
    rows = []
    reports = {}
    teacher_xi = None
    for mid, model, xi, q, report, cyc, ll in results:
        flat = xi[test_idx].reshape(-1, xi.shape[2])
        xi_test_flat[mid] = flat
        if mid == "teacher":
            teacher_xi = flat
        rows.append(
            EvalRow(
                model_id=mid, M=model.n_states, q=q.q_total,
                qk_mean=report.mean, qk_sem=report.sem, loglik_test=ll,
                d_s_to_t=float("nan"), d_t_to_s=float("nan"),
                cycle_d=cyc.d_r_to_z, n_failed=report.n_failed,
                score_kind=report.score_kind,
            )
        )
        reports[mid] = {
            "model_id": mid,
            "Q": q.q_total,
            "per_neuron": q.per_neuron,
            "excluded_neurons": q.excluded_neurons,
            "k": report.k,
            "s": report.s,
            "scores": report.scores.tolist(),
            "mean": report.mean,
            "sem": report.sem,
            "failures": report.n_failed,
        }

    for row in rows:
        if row.model_id == "teacher":
            row.d_t_to_s = crossdecode.cross_decode_hmm(teacher_xi, teacher_xi, seed=seed)
            row.d_s_to_t = row.d_t_to_s
            continue
        flat = xi_test_flat[row.model_id]
        row.d_t_to_s = crossdecode.cross_decode_hmm(teacher_xi, flat, seed=seed)
        row.d_s_to_t = crossdecode.cross_decode_hmm(flat, teacher_xi, seed=seed)

    teacher_row = next(r for r in rows if r.model_id == "teacher")
    student_rows = [r for r in rows if r.model_id != "teacher"]
    filtered = apply_filter(student_rows, metrics_cfg.get("filter", {"mode": "teacher-gap", "gap": 1e-3}),
                            reference=teacher_row.q, score=lambda r: r.q)

    cd_matrix = None
    if len(filtered) >= 2:
        cd_matrix = crossdecode.cross_decode_matrix(
            {mid: xi_test_flat[mid] for mid in filtered}, method="multinomial-kl", seed=seed
        )
        col = cd_matrix.column_averages()
        lookup = dict(zip(cd_matrix.model_ids, col))
        for row in rows:
            if row.model_id in lookup:
                row.cd_col_avg = float(lookup[row.model_id])

    return {
        "rows": rows,
        "teacher_row": teacher_row,
        "student_rows": student_rows,
        "filtered": filtered,
        "cd_matrix": cd_matrix,
        "reports": reports,
    }


def _test_posterior(post: hmm.HmmPosterior, test_idx: np.ndarray) -> hmm.HmmPosterior:
    return hmm.HmmPosterior(xi=post.xi[test_idx], trial_logliks=post.trial_logliks[test_idx])


def eval_lgssm_study(
    dataset: SpikeDataset,
    teacher: lgssm.LgssmModel,
    students: dict[str, lgssm.LgssmModel],
    metrics_cfg: dict,
    seed: int,
    jobs: int = 1,
) -> dict:
    """Gaussian analogue: log-likelihood in place of Q, k-shot MSE in
    place of few-shot bits per spike, linear cross-decoding throughout."""
    part = dataset.partition
    held_in, held_out = part.held_in, part.held_out
    test_idx = dataset.test_indices
    X = dataset.counts
    X_in = X[:, :, held_in]
    k = int(metrics_cfg.get("k", 10))
    plan = datamodel.build_kshot_plan(dataset, k=k, seed=seed)
    fs_spec = metrics.FewShotRegressorSpec(family="linear-lsq")

    cov = covered_channels(part)
    X_cov = X[:, :, cov]
    teacher_cov = np.arange(teacher.n_channels)
    entries = [("teacher", teacher, teacher_cov)]
    for mid in sorted(students):
        entries.append((mid, students[mid], cov))

    def eval_one(entry):
        mid, model, model_cov = entry
        enc = model.restrict(columns_of(held_in, model_cov))
        traj, ll_in = lgssm.kalman_smooth(enc, X_in)
        scored = model.restrict(columns_of(cov, model_cov))  # held-in + held-out
        _, ll_cov = lgssm.kalman_smooth(scored, X_cov)
        # co-smoothing log-likelihood: held-out density given held-in
        ll_cond = ll_cov - ll_in
        R_out = lgssm.predict_obs_means(model, traj, columns_of(held_out, model_cov))
        report = metrics.fewshot_cosmoothing(traj.means, dataset, plan, fs_spec, family="gaussian")
        cyc = crossdecode.cycle_consistency(
            traj.means[test_idx].reshape(-1, traj.means.shape[2]),
            R_out[test_idx].reshape(-1, R_out.shape[2]),
            model_id=mid,
        )
        return mid, model, traj.means, report, cyc, float(ll_cond[test_idx].mean())

    results = _jobs_map(eval_one, entries, jobs)
    results.sort(key=lambda r: (r[0] != "teacher", r[0]))

    lat_test_flat = {}
    rows = []
    reports = {}
    teacher_lat = None
    for mid, model, means, report, cyc, ll in results:
        flat = means[test_idx].reshape(-1, means.shape[2])
        lat_test_flat[mid] = flat
        if mid == "teacher":
            teacher_lat = flat
        rows.append(
            EvalRow(
                model_id=mid, M=model.n_states, q=float("nan"),
                qk_mean=report.mean, qk_sem=report.sem, loglik_test=ll,
                d_s_to_t=float("nan"), d_t_to_s=float("nan"),
                cycle_d=cyc.d_r_to_z, n_failed=report.n_failed, score_kind=report.score_kind,
            )
        )
        reports[mid] = {
            "model_id": mid, "loglik_test": ll, "k": report.k, "s": report.s,
            "scores": report.scores.tolist(), "mean": report.mean, "sem": report.sem,
            "failures": report.n_failed,
        }

    for row in rows:
        flat = lat_test_flat[row.model_id]
        row.d_t_to_s = crossdecode.cross_decode_linear(teacher_lat, flat).d
        row.d_s_to_t = crossdecode.cross_decode_linear(flat, teacher_lat).d

    teacher_row = next(r for r in rows if r.model_id == "teacher")
    student_rows = [r for r in rows if r.model_id != "teacher"]
    filt_cfg = metrics_cfg.get("filter", {"mode": "teacher-gap", "gap": 2.0})
    filtered = apply_filter(student_rows, filt_cfg, reference=teacher_row.loglik_test,
                            score=lambda r: r.loglik_test)

    cd_matrix = None
    if len(filtered) >= 2:
        cd_matrix = crossdecode.cross_decode_matrix(
            {mid: lat_test_flat[mid] for mid in filtered}, method="linear-r2", seed=seed
        )
        lookup = dict(zip(cd_matrix.model_ids, cd_matrix.column_averages()))
        for row in rows:
            if row.model_id in lookup:
                row.cd_col_avg = float(lookup[row.model_id])

    return {
        "rows": rows,
        "teacher_row": teacher_row,
        "student_rows": student_rows,
        "filtered": filtered,
        "cd_matrix": cd_matrix,
        "reports": reports,
    }


def apply_filter(student_rows, filt_cfg: dict, reference: float, score) -> list[str]:
    """High-score filter: absolute teacher gap or fraction of the best."""
    mode = filt_cfg.get("mode", "teacher-gap")
    if mode == "teacher-gap":
        gap = float(filt_cfg.get("gap", 1e-3))
        return [r.model_id for r in student_rows if score(r) > reference - gap]
    if mode == "relative-max":
        frac = float(filt_cfg.get("frac", 0.8))
        best = max(score(r) for r in student_rows)
        return [r.model_id for r in student_rows if score(r) > frac * best]
    raise ConfigError(f"unknown filter mode {mode!r}")


def study_correlations(result: dict, few_shot_sign: str = "greater") -> dict:
    """Spearman statistics behind the study's acceptance checks.

    ``few_shot_sign`` is the expected association between the few-shot
    score and D_{T->S}: "less" for bits-per-spike (higher is better),
    "greater" for MSE (lower is better).
    """
    rows = result["student_rows"]
    filtered = set(result["filtered"])
    frows = [r for r in rows if r.model_id in filtered]
    score = [r.q if not np.isnan(r.q) else r.loglik_test for r in rows]
    fscore = [r.q if not np.isnan(r.q) else r.loglik_test for r in frows]
    out = {}
    rho, p = spearman_one_tailed(score, [r.d_s_to_t for r in rows], "less")
    out["score_vs_dst"] = {"rho": rho, "p_one_tailed": p, "n": len(rows), "alternative": "less"}
    rho, p = spearman_one_tailed([r.qk_mean for r in frows], [r.d_t_to_s for r in frows], few_shot_sign)
    out["fewshot_vs_dts_filtered"] = {
        "rho": rho, "p_one_tailed": p, "n": len(frows), "alternative": few_shot_sign
    }
    rho, p = spearman_one_tailed(fscore, [r.d_t_to_s for r in frows], "less")
    out["score_vs_dts_filtered"] = {"rho": rho, "p_one_tailed": p, "n": len(frows), "alternative": "less"}
    if frows and not np.isnan(frows[0].cd_col_avg):
        rho, p = spearman_one_tailed([r.cd_col_avg for r in frows], [r.d_t_to_s for r in frows], "greater")
        out["colavg_vs_dts_filtered"] = {"rho": rho, "p_one_tailed": p, "n": len(frows), "alternative": "greater"}
        rho, p = spearman_one_tailed([r.cycle_d for r in frows], [r.d_t_to_s for r in frows], "greater")
        out["cycle_vs_dts_filtered"] = {"rho": rho, "p_one_tailed": p, "n": len(frows), "alternative": "greater"}
    return out


# ---------------------------------------------------------------------------
# file emission shared by eval/control
# ---------------------------------------------------------------------------

SUMMARY_HEADER = [
    "model_id", "M", "q", "qk_mean", "qk_sem", "loglik_test",
    "d_s_to_t", "d_t_to_s", "cycle_d", "cd_col_avg", "n_failed", "score_kind", "filtered",
]


def write_study_outputs(result: dict, out_dir: str, seed: int) -> None:
    os.makedirs(out_dir, exist_ok=True)
    filtered = set(result["filtered"])
    rows = []
    flat = []
    for r in result["rows"]:
        rows.append([
            r.model_id, r.M, r.q, r.qk_mean, r.qk_sem, r.loglik_test,
            r.d_s_to_t, r.d_t_to_s, r.cycle_d, r.cd_col_avg, r.n_failed,
            r.score_kind, int(r.model_id in filtered),
        ])
        for name, val in (
            ("q", r.q), ("qk_mean", r.qk_mean), ("qk_sem", r.qk_sem),
            ("loglik_test", r.loglik_test), ("d_s_to_t", r.d_s_to_t),
            ("d_t_to_s", r.d_t_to_s), ("cycle_d", r.cycle_d), ("cd_col_avg", r.cd_col_avg),
        ):
            flat.append([r.model_id, name, val])
    write_csv(os.path.join(out_dir, "summary.csv"), SUMMARY_HEADER, rows)
    write_csv(os.path.join(out_dir, "metrics.csv"), ["model_id", "metric", "value"], flat)

    cd = result["cd_matrix"]
    if cd is not None:
        cd_rows = []
        for u, su in enumerate(cd.model_ids):
            for v, sv in enumerate(cd.model_ids):
                cd_rows.append([su, sv, cd.method, cd.D[u, v]])
        write_csv(os.path.join(out_dir, "crossdecode.csv"),
                  ["source_id", "target_id", "method", "D"], cd_rows)
        dump_json(os.path.join(out_dir, "crossdecode.json"), {
            "model_ids": cd.model_ids,
            "method": cd.method,
            "column_averages": cd.column_averages().tolist(),
        })

    rep_dir = os.path.join(out_dir, "reports")
    os.makedirs(rep_dir, exist_ok=True)
    for mid, rep in result["reports"].items():
        dump_json(os.path.join(rep_dir, f"{mid}.json"), rep)


# ---------------------------------------------------------------------------
# control variants
# ---------------------------------------------------------------------------

def control_variant_partition(base: datamodel.NeuronPartition, name: str, seed: int) -> datamodel.NeuronPartition:
    """Re-partition the same channels for the hard co-smoothing control.

    "widen-held-out": keep held-in, fold the k-out channels into held-out
    (k-out then aliases its old channels).  "shrink-held-in": 5 held-in,
    5 held-out, unchanged k-out.
    """
    rng = substream(seed, "control-variant")
    if name == "widen-held-out":
        held_out = np.sort(np.concatenate([base.held_out, base.k_out]))
        return datamodel.NeuronPartition(base.held_in, held_out, base.k_out, alias_kout=True)
    if name == "shrink-held-in":
        n_small = min(5, base.held_in.size, base.held_out.size)
        held_in = np.sort(rng.choice(base.held_in, size=n_small, replace=False))
        held_out = np.sort(rng.choice(base.held_out, size=n_small, replace=False))
        return datamodel.NeuronPartition(held_in, held_out, base.k_out, alias_kout=base.alias_kout)
    raise ConfigError(f"unknown control variant {name!r}")


def run_control_variant(
    dataset: SpikeDataset,
    teacher: hmm.HmmModel,
    variant: str,
    fit_cfg: dict,
    metrics_cfg: dict,
    seed: int,
    jobs: int = 1,
) -> dict:
    part = control_variant_partition(dataset.partition, variant, seed)
    ds_v = SpikeDataset(
        counts=dataset.counts, train_indices=dataset.train_indices,
        test_indices=dataset.test_indices, partition=part, seed=dataset.seed,
    )
    students = {mid: m for mid, (m, _) in fit_hmm_students(ds_v, fit_cfg, seed=seed, jobs=jobs).items()}
    return eval_hmm_study(ds_v, teacher, students, metrics_cfg, seed=seed, jobs=jobs)


# ---------------------------------------------------------------------------
# theory sweep
# ---------------------------------------------------------------------------

THEORY_HEADER = [
    "setting", "student", "B_star", "k", "p", "M", "sigma_obs", "sigma_ext",
    "theory", "mc_mean", "mc_sem", "n_mc", "n_clipped",
]


def run_theory_sweep(cfg: dict, seed: int) -> list[list]:
    """One row per grid point per setting, theory and MC side by side."""
    rows = []
    hm = cfg.get("hmm")
    if hm:
        n_mc = int(hm.get("n_mc", 100000))
        for B in hm.get("B_star", [0.3, 0.5]):
            for k in hm.get("k", [2, 4, 8, 16, 32, 64]):
                for student in ("good", "bad"):
                    c = theory_mod.HmmTheoryConfig(B_star=float(B), k=int(k), student=student)
                    th = theory_mod.hmm_expected_loss_theory(c)
                    mc = theory_mod.hmm_expected_loss_mc(c, n_mc=n_mc, seed=seed)
                    rows.append(["hmm-fewshot", student, float(B), int(k), "", "", "", "",
                                 th, mc.mean, mc.sem, mc.n_mc, mc.n_clipped])
    rg = cfg.get("ridgeless")
    if rg:
        n_mc = int(rg.get("n_mc", 2000))
        p = int(rg.get("p", 50))
        s_obs = float(rg.get("sigma_obs", 0.3))
        for k in rg.get("k", [10, 25, 100, 200]):
            for s_ext in rg.get("sigma_ext", [0.5, 1.0, 2.0]):
                c = theory_mod.RidgelessConfig(p=p, k=int(k), sigma_obs=s_obs, sigma_ext=float(s_ext))
                _, _, risk = theory_mod.ridgeless_risk_theory(c)
                mc = theory_mod.ridgeless_risk_mc(c, n_mc=n_mc, seed=seed)
                rows.append(["ridgeless", "", "", int(k), p, "", s_obs, float(s_ext),
                             risk, mc.mean, mc.sem, mc.n_mc, 0])
    pr = cfg.get("prototype")
    if pr:
        n_mc = int(pr.get("n_mc", 10000))
        for M, k in pr.get("cases", [[10, 5], [10, 20], [50, 20]]):
            for s2 in pr.get("sigma_ext_sq", [2.0, 10.0, 50.0]):
                c = theory_mod.PrototypeConfig(M=int(M), k=int(k), sigma_ext=float(np.sqrt(s2)))
                th = theory_mod.prototype_error_theory(c)
                mc = theory_mod.prototype_error_mc(c, n_mc=n_mc, seed=seed)
                rows.append(["prototype", "", "", int(k), "", int(M), "", float(np.sqrt(s2)),
                             th, mc.mean, mc.sem, mc.n_mc, 0])
    return rows


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _load_dataset_teacher(cfg: dict):
    ds = datamodel.load_dataset(cfg["dataset_dir"])
    kind = cfg.get("kind", "hmm-student-teacher")
    if kind.startswith("lgssm"):
        teacher = lgssm.load_model(cfg["teacher_path"])
    else:
        teacher = hmm.load_model(cfg["teacher_path"])
    return ds, teacher, kind


def cmd_generate(cfg: dict, out_dir: str, seed: int) -> None:
    os.makedirs(out_dir, exist_ok=True)
    kind = cfg.get("kind", "hmm-student-teacher")
    if kind == "hmm-student-teacher" or kind == "hard-cosmoothing-control":
        paths = generate_hmm_experiment(cfg, out_dir, seed)
    elif kind == "lgssm-student-teacher":
        paths = generate_lgssm_experiment(cfg, out_dir, seed)
    else:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    dump_json(os.path.join(out_dir, "generate_manifest.json"), {"kind": kind, "seed": seed, **paths})


def cmd_fit(cfg: dict, out_dir: str, seed: int, jobs: int) -> None:
    ds, _, kind = _load_dataset_teacher(cfg)
    os.makedirs(out_dir, exist_ok=True)
    models_dir = os.path.join(out_dir, "models")
    os.makedirs(models_dir, exist_ok=True)
    fit_cfg = cfg.get("fit", {})
    log = {}
    if kind.startswith("lgssm"):
        fitted = fit_lgssm_students(ds, fit_cfg, seed=seed, jobs=jobs)
        for mid, (model, trace) in sorted(fitted.items()):
            lgssm.save_model(model, os.path.join(models_dir, f"{mid}.json"))
            log[mid] = {"trace": trace.tolist(), "monotone": bool(np.all(np.diff(trace) >= -1e-6 * np.abs(trace[:-1]) - 1e-9))}
    else:
        fitted = fit_hmm_students(ds, fit_cfg, seed=seed, jobs=jobs)
        for mid, (model, trace) in sorted(fitted.items()):
            hmm.save_model(model, os.path.join(models_dir, f"{mid}.json"))
            log[mid] = {"trace": trace.tolist(), "monotone": bool(np.all(np.diff(trace) >= -1e-9))}
    dump_json(os.path.join(out_dir, "fit_log.json"), log)


def cmd_eval(cfg: dict, out_dir: str, seed: int, jobs: int) -> None:
    ds, teacher, kind = _load_dataset_teacher(cfg)
    models_dir = cfg["models_dir"]
    metrics_cfg = cfg.get("metrics", {})
    students = {}
    for name in sorted(os.listdir(models_dir)):
        if not name.endswith(".json"):
            continue
        mid = name[: -len(".json")]
        loader = lgssm.load_model if kind.startswith("lgssm") else hmm.load_model
        students[mid] = loader(os.path.join(models_dir, name))
    if not students:
        raise ConfigError(f"no model files found in {models_dir}")
    if kind.startswith("lgssm"):
        result = eval_lgssm_study(ds, teacher, students, metrics_cfg, seed=seed, jobs=jobs)
        corr = study_correlations(result, few_shot_sign="greater")
    else:
        result = eval_hmm_study(ds, teacher, students, metrics_cfg, seed=seed, jobs=jobs)
        corr = study_correlations(result, few_shot_sign="less")
    write_study_outputs(result, out_dir, seed)
    dump_json(os.path.join(out_dir, "correlations.json"), corr)


def cmd_theory(cfg: dict, out_dir: str, seed: int) -> None:
    os.makedirs(out_dir, exist_ok=True)
    rows = run_theory_sweep(cfg, seed=seed)
    write_csv(os.path.join(out_dir, "theory_mc.csv"), THEORY_HEADER, rows)


def cmd_control(cfg: dict, out_dir: str, seed: int, jobs: int) -> None:
    ds, teacher, _ = _load_dataset_teacher(cfg)
    os.makedirs(out_dir, exist_ok=True)
    fit_cfg = cfg.get("fit", {})
    metrics_cfg = cfg.get("metrics", {})
    variants = cfg.get("variants", ["widen-held-out", "shrink-held-in"])
    base_summary = cfg.get("base_summary")

    control_rows = []
    all_corr = {}
    for variant in variants:
        result = run_control_variant(ds, teacher, variant, fit_cfg, metrics_cfg, seed=seed, jobs=jobs)
        vdir = os.path.join(out_dir, variant)
        write_study_outputs(result, vdir, seed)
        corr = study_correlations(result, few_shot_sign="less")
        all_corr[variant] = corr
        for r in result["student_rows"]:
            control_rows.append([variant, r.model_id, r.q, r.qk_mean, r.qk_sem, r.d_t_to_s])
    write_csv(os.path.join(out_dir, "control.csv"),
              ["variant", "model_id", "q", "qk_mean", "qk_sem", "d_t_to_s"], control_rows)
    payload = {"correlations": all_corr}
    if base_summary:
        payload["base_summary"] = base_summary
    dump_json(os.path.join(out_dir, "control_correlations.json"), payload)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lveval", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "fit", "eval", "theory", "control"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=1)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        cfg = _load_config(args.config)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        if args.command == "generate":
            cmd_generate(cfg, args.out, seed)
        elif args.command == "fit":
            cmd_fit(cfg, args.out, seed, args.jobs)
        elif args.command == "eval":
            cmd_eval(cfg, args.out, seed, args.jobs)
        elif args.command == "theory":
            cmd_theory(cfg, args.out, seed)
        elif args.command == "control":
            cmd_control(cfg, args.out, seed, args.jobs)
        return 0
    except ConfigError as exc:
        print(f"lveval: config error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, LvevalError) as exc:
        print(f"lveval: numerical error: {exc}", file=sys.stderr)
        return 3
    except (KeyError, FileNotFoundError) as exc:
        print(f"lveval: config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
