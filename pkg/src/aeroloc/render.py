"""Synthetic surround-view images and the seeded forward model behind
``bev_source = transformer``.

Cameras look at a flat ground plane (vehicle-frame ``z = 0``) textured with
the first three aerial channels; rays that miss the ground stay black.
"""

from __future__ import annotations

import math

import numpy as np

from .bev import BevConfig, BevParams, bev_mask, build_bev
from .encoder import EncoderParams, encode_aerial, encode_ground
from .geometry import CameraRig, PinholeCamera, SE2Pose
from .grid import FeatureMap, sample_array

CAMERA_HEIGHT = 1.6
IMAGE_SIZE = (48, 64)
MAX_RANGE = 40.0


def surround_rig(width: int = IMAGE_SIZE[1], height: int = IMAGE_SIZE[0]) -> CameraRig:
    """Four 90-degree cameras: front, left, back, right."""
    fx = width / 2.0
    names = ("cam_front", "cam_left", "cam_back", "cam_right")
    return CameraRig(tuple(
        PinholeCamera.looking(n, k * math.pi / 2, fx, width, height, (0.0, 0.0, CAMERA_HEIGHT))
        for k, n in enumerate(names)
    ))


def ground_rays(cam: PinholeCamera):
    """Vehicle-frame ground hit ``(x, y)`` of every pixel and a hit mask."""
    u, v = np.meshgrid(np.arange(cam.width, dtype=np.float64), np.arange(cam.height, dtype=np.float64))
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
    R = cam.rotation
    d_veh = d_cam @ R  # R^T applied to row vectors
    origin = -R.T @ np.asarray(cam.translation, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = -origin[2] / d_veh[..., 2]
    hit = (d_veh[..., 2] < 0) & (lam > 0)
    lam = np.where(hit, lam, 0.0)
    x = origin[0] + lam * d_veh[..., 0]
    y = origin[1] + lam * d_veh[..., 1]
    hit &= np.hypot(x, y) <= MAX_RANGE
    return x, y, hit


def render_views(texture: FeatureMap, pose: SE2Pose, rig: CameraRig) -> list[FeatureMap]:
    out = []
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    cx, cy = texture.center()
    for cam in rig:
        x, y, hit = ground_rays(cam)
        wx = pose.x + c * x - s * y
        wy = pose.y + s * x + c * y
        img = sample_array(texture.data, wx / texture.resolution + cx, wy / texture.resolution + cy)
        out.append(FeatureMap(img * hit[..., None], 1.0))
    return out


def forward_models(cfg, n_cameras: int):
    """Seeded encoder and BEV parameters for a scenario config."""
    bev_cfg = BevConfig(d_B=cfg.bev_size, q_B=cfg.bev_resolution)
    ground = EncoderParams.seeded(bev_cfg.c_B, bev_cfg.c_B, cfg.seed * 4 + 1)
    aerial = EncoderParams.seeded(cfg.channels, cfg.channels, cfg.seed * 4 + 2, bypass=True)
    bev_params = BevParams.seeded(bev_cfg, n_cameras, bev_cfg.c_B, cfg.seed * 4 + 3)
    return bev_cfg, ground, aerial, bev_params


def add_camera_images(scenario) -> None:
    """Render camera views per frame, then encode them into BEV maps and the
    aerial map into matching features."""
    cfg = scenario.config
    rig = surround_rig()
    texture = scenario.aerial.with_data(scenario.aerial.data[:, :, :3])
    bev_cfg, ground, aerial_params, bev_params = forward_models(cfg, len(rig))
    # Aerial texture rescaled into [0, 1] like an RGB image.
    lo, hi = texture.data.min(), texture.data.max()
    rgb = texture.with_data((texture.data - lo) / max(hi - lo, 1e-12))
    scenario.aerial = encode_aerial(rgb, aerial_params)
    scenario.rig = rig
    for fr in scenario.frames:
        views = render_views(rgb, fr.gt, rig)
        scenario.images.append(views)
        pv = encode_ground(views, ground)
        scenario.bev.append(build_bev(bev_cfg, rig, pv, bev_params, cfg.seed))
    scenario.mask = bev_mask(bev_cfg)
