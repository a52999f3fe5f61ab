import logging
import math

import numpy as np

from .config import MATCH_TOL, MIN_MATCHES
from .exceptions import TooFewMatches


def match_by_time(est_times, truth_times, tol=MATCH_TOL):
    """
    Nearest-neighbour time association.

    Arguments:
    est_times -- (N,) estimate stamps, any order
    truth_times -- (M,) truth stamps, any order
    tol -- Largest accepted time difference in seconds

    Returns:
    tuple -- (estimate indices, truth indices) of the matched pairs
    """
    est_times = np.asarray(est_times, dtype=float).reshape(-1)
    truth_times = np.asarray(truth_times, dtype=float).reshape(-1)
    if not len(est_times) or not len(truth_times):
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    order = np.argsort(truth_times, kind="stable")
    sorted_t = truth_times[order]
    pos = np.clip(np.searchsorted(sorted_t, est_times), 1, len(sorted_t) - 1) if len(sorted_t) > 1 \
        else np.zeros(len(est_times), dtype=int)
    left = np.maximum(pos - 1, 0)
    pick = np.where(np.abs(sorted_t[left] - est_times) <= np.abs(sorted_t[pos] - est_times), left, pos)
    ok = np.abs(sorted_t[pick] - est_times) <= tol
    return np.flatnonzero(ok), order[pick[ok]]


def align_4dof(est, truth):
    """
    Yaw and translation minimising the squared distance from est to truth.

    Returns:
    tuple -- (yaw in radians, translation (3,))
    """
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    a = est[:, :2] - est[:, :2].mean(axis=0)
    b = truth[:, :2] - truth[:, :2].mean(axis=0)
    yaw = math.atan2(float((a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]).sum()), float((a * b).sum()))
    c, s = math.cos(yaw), math.sin(yaw)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return yaw, (truth - est @ R.T).mean(axis=0)


def compute_metrics(est_times, est_positions, truth_times, truth_positions, align_yaw=False,
                    tol=MATCH_TOL, min_matches=MIN_MATCHES):
    """
    Absolute translational error statistics.

    Arguments:
    est_times, est_positions -- Estimated trajectory, (N,) and (N, 3)
    truth_times, truth_positions -- Ground truth, (M,) and (M, 3)
    align_yaw -- Apply a yaw + translation alignment before comparing
    tol -- Time association tolerance in seconds
    min_matches -- Fewer matched poses raise TooFewMatches

    Returns:
    dict -- rmse, max, rmse_x, rmse_y, rmse_z, matched and, when aligned, align_yaw_deg
    """
    est_positions = np.asarray(est_positions, dtype=float).reshape(-1, 3)
    truth_positions = np.asarray(truth_positions, dtype=float).reshape(-1, 3)
    i_est, i_truth = match_by_time(est_times, truth_times, tol)
    if len(i_est) < min_matches:
        raise TooFewMatches(f"{len(i_est)} matched poses, need {min_matches}")
    est = est_positions[i_est]
    truth = truth_positions[i_truth]
    result = {}
    if align_yaw:
        yaw, t = align_4dof(est, truth)
        c, s = math.cos(yaw), math.sin(yaw)
        est = est @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).T + t
        result["align_yaw_deg"] = math.degrees(yaw)
    err = est - truth
    norms = np.linalg.norm(err, axis=1)
    per_axis = np.sqrt((err ** 2).mean(axis=0))
    result.update({
        "rmse": float(np.sqrt((norms ** 2).mean())),
        "max": float(norms.max()),
        "rmse_x": float(per_axis[0]),
        "rmse_y": float(per_axis[1]),
        "rmse_z": float(per_axis[2]),
        "matched": int(len(norms)),
    })
    logging.info(f"ATE over {len(norms)} poses: RMSE {result['rmse']:.3f} m, MAX {result['max']:.3f} m")
    return result


def runtime_summary(records):
    """Mean frontend and backend milliseconds over diagnostics records."""
    out = {}
    for key in ("frontend_ms", "backend_ms"):
        values = [r[key] for r in records if r.get(key) is not None]
        out[f"{key}_mean"] = float(np.mean(values)) if values else 0.0
    return out
