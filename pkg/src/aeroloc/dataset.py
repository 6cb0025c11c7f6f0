"""Scenario directories on disk.

Layout (all paths in ``frames.txt`` are relative to the directory)::

    scenario.cfg    key = value settings (optional for external data)
    frames.txt      one ``frame`` line per frame
    odometry.txt    ``odom i i+1 dx dy dyaw`` + 6 noise entries
    gt.traj         ground-truth trajectory
    aerial.fmap     aerial feature map (world frame, centred)
    mask.fmap       BEV validity mask (optional; circular default)
    bev/NNNNNN.fmap per-frame BEV observations
    rig.txt, cams/  camera rig and per-camera images (transformer source)
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .formats import (
    FormatError, atomic_write, config_to_text, fmap_to_bytes, read_config, read_fmap,
    read_rig, read_rows, write_rig, write_trajectory,
)
from .grid import FeatureMap, circular_mask
from .pipeline import FrameRecord, Scenario, frames_from_rows, frames_to_text, odometry_from_rows, odometry_to_text


def write_scenario(root, scenario: Scenario) -> None:
    root = Path(root)
    frames = []
    for fr, bev in zip(scenario.frames, scenario.bev):
        rel = f"bev/{fr.frame_id:06d}.fmap"
        atomic_write(root / rel, fmap_to_bytes(bev))
        frames.append(FrameRecord(fr.frame_id, fr.timestamp, fr.gt, fr.prior, "aerial.fmap", rel))
    if scenario.rig is not None:
        write_rig(root / "rig.txt", scenario.rig)
        for k, (fr, views) in enumerate(zip(scenario.frames, scenario.images)):
            paths = []
            for cam, img in zip(scenario.rig, views):
                rel = f"cams/{fr.frame_id:06d}_{cam.id}.fmap"
                atomic_write(root / rel, fmap_to_bytes(img))
                paths.append(rel)
            f = frames[k]
            frames[k] = FrameRecord(f.frame_id, f.timestamp, f.gt, f.prior, f.aerial_path, f.bev_path,
                                    "rig.txt", tuple(paths))
    atomic_write(root / "aerial.fmap", fmap_to_bytes(scenario.aerial))
    atomic_write(root / "mask.fmap", fmap_to_bytes(FeatureMap(scenario.mask.astype(np.float32), scenario.bev[0].resolution)))
    atomic_write(root / "frames.txt", frames_to_text(frames))
    atomic_write(root / "odometry.txt", odometry_to_text(scenario.odometry))
    atomic_write(root / "scenario.cfg", config_to_text(scenario.config.to_mapping()))
    write_trajectory(root / "gt.traj", [f.frame_id for f in frames], [f.timestamp for f in frames],
                     [f.gt for f in frames])


@dataclass
class Dataset:
    root: Path
    settings: dict
    frames: list[FrameRecord]
    odometry: list

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        if not root.is_dir():
            raise FormatError(f"{root}: scenario directory not found")
        cfg_path = root / "scenario.cfg"
        settings = read_config(cfg_path) if cfg_path.exists() else {}
        manifest = root / "frames.txt"
        frames = frames_from_rows(read_rows(manifest), str(manifest))
        if not frames:
            raise FormatError(f"{manifest}: no frames")
        for fr in frames:
            for rel in (fr.aerial_path, fr.bev_path, fr.rig_path, *fr.camera_paths):
                if rel != "-" and not (root / rel).exists():
                    raise FormatError(f"{root / rel}: referenced by {manifest} but missing")
        odo_path = root / "odometry.txt"
        odometry = odometry_from_rows(read_rows(odo_path), str(odo_path)) if odo_path.exists() else []
        if odometry and len(odometry) != len(frames) - 1:
            raise FormatError(f"{odo_path}: {len(odometry)} steps for {len(frames)} frames")
        return cls(root, settings, frames, odometry)

    def path(self, rel: str) -> Path:
        return self.root / rel

    @cached_property
    def aerial(self) -> FeatureMap:
        rels = {fr.aerial_path for fr in self.frames}
        if len(rels) != 1 or "-" in rels:
            raise FormatError(f"{self.root / 'frames.txt'}: frames must share one aerial map")
        return read_fmap(self.root / rels.pop())

    def bev(self, fr: FrameRecord) -> FeatureMap:
        if fr.bev_path == "-":
            raise FormatError(f"{self.root / 'frames.txt'}: frame {fr.frame_id} has no BEV path")
        return read_fmap(self.root / fr.bev_path)

    def mask(self, bev: FeatureMap) -> np.ndarray:
        p = self.root / "mask.fmap"
        if not p.exists():
            return circular_mask(bev.height, bev.resolution)
        m = read_fmap(p).data[:, :, 0] > 0.5
        if m.shape != (bev.height, bev.width):
            raise FormatError(f"{p}: mask shape {m.shape} does not match BEV {bev.height}x{bev.width}")
        return m

    def rig(self):
        rels = {fr.rig_path for fr in self.frames} - {"-"}
        return read_rig(self.root / rels.pop()) if rels else None
