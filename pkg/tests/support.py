"""Shared helpers for the test-suite."""

import numpy as np

from aeroloc.matcher import HypothesisGrid, MatchParams, match, relative_pose, rotation_set
from aeroloc.pipeline import aerial_patch


def scenario_matcher(scenario, bin_deg=2.0):
    cfg = scenario.config
    grid = HypothesisGrid(cfg.search_radius, cfg.resolution,
                          rotation_set(cfg.rotation_bound, np.radians(bin_deg)))
    params = MatchParams(c_A=cfg.channels, q_A=cfg.resolution, d_A=cfg.patch_size)
    return grid, params


def match_frames(scenario):
    grid, params = scenario_matcher(scenario)
    size = scenario.config.patch_size
    return [match(aerial_patch(scenario.aerial, fr.prior, size), b, scenario.mask, params, grid)
            for fr, b in zip(scenario.frames, scenario.bev)]


def recovered(P, frame):
    """Argmax within one translation cell and one rotation bin of the truth."""
    a, r, c = P.argmax()
    ta, tr, tc = P.grid.nearest_index(relative_pose(frame.prior, frame.gt))
    return abs(a - ta) <= 1 and abs(r - tr) <= 1 and abs(c - tc) <= 1
