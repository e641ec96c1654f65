"""Online map tracking: render at the prior, align the live frame, compose."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import se3
from .camera import CameraModel, undistort_image
from .geodata import MapStack
from .iclk import AlignConfig, AlignmentResult, align
from .renderer import TerrainMesh, build_mesh, check_pose_over_extent, render
from .se3 import PoseSE3

logger = logging.getLogger(__name__)


class TrackingError(ValueError):
    pass


@dataclass(frozen=True)
class TrackerState:
    """``prior`` is ``T^W_{C_ref}``, the camera-to-world pose rendered next."""

    prior: PoseSE3
    frame: int
    maps: MapStack
    cam: CameraModel
    mesh: TerrainMesh
    config: AlignConfig
    last_result: AlignmentResult | None = None
    last_ref_depth: np.ndarray | None = None
    workers: int | None = None


@dataclass(frozen=True)
class FrameReport:
    index: int
    pose: PoseSE3
    converged: bool
    result: AlignmentResult
    epe: float | None = None
    angular: float | None = None
    translational: float | None = None


@dataclass
class TrajectoryReport:
    frames: list = field(default_factory=list)

    def __len__(self):
        return len(self.frames)

    @property
    def poses(self):
        return [f.pose for f in self.frames]

    def to_text(self) -> str:
        lines = ["# index converged epe angular translational r11 r12 r13 t1 r21 r22 r23 t2 r31 r32 r33 t3"]
        for f in self.frames:
            errs = " ".join("nan" if e is None else repr(float(e))
                            for e in (f.epe, f.angular, f.translational))
            lines.append(f"{f.index} {int(f.converged)} {errs} {f.pose.to_text()}")
        return "\n".join(lines) + "\n"


def initialize(prior: PoseSE3, maps: MapStack, cam: CameraModel, config: AlignConfig | None = None,
               workers: int | None = None) -> TrackerState:
    """Validate the prior against the most recent map layer and build its mesh."""
    layer = maps.most_recent()
    try:
        check_pose_over_extent(prior, layer.ortho.extent(), layer.elevation)
    except ValueError as exc:
        raise TrackingError(str(exc)) from exc
    mesh = build_mesh(layer.ortho, layer.elevation)
    return TrackerState(prior=prior, frame=0, maps=maps, cam=cam, mesh=mesh,
                        config=config or AlignConfig(), workers=workers)


def step(state: TrackerState, live_image) -> tuple[TrackerState, PoseSE3]:
    """Track one frame; returns the new state and ``T^W_{C_1}``.

    A frame whose alignment does not converge keeps the prior unchanged.
    """
    live = np.asarray(live_image)
    if live.shape[:2] != (state.cam.height, state.cam.width):
        raise TrackingError(
            f"live image is {live.shape[1]}x{live.shape[0]}, camera is {state.cam.width}x{state.cam.height}"
        )
    if state.cam.has_distortion:
        live = undistort_image(state.cam, live)
    ref = render(state.mesh, state.prior, state.cam, workers=state.workers)
    if not ref.mask.any():
        raise TrackingError("the prior sees no terrain")
    result = align(ref.image, ref.depth, live, state.cam, PoseSE3.identity(), state.config)
    if result.converged:
        pose = se3.compose(state.prior, result.pose)
    else:
        logger.info("frame %d did not converge; keeping the prior", state.frame)
        pose = state.prior
    new_state = replace(state, prior=pose, frame=state.frame + 1, last_result=result,
                        last_ref_depth=ref.depth)
    return new_state, pose


def track_sequence(state: TrackerState, images, gt_poses=None) -> tuple[TrackerState, TrajectoryReport]:
    """Fold ``step`` over ``images``; ``gt_poses`` are world poses ``T^W_{C}``."""
    from .eval import angular_error, epe, translational_error

    images = list(images)
    if not images:
        raise TrackingError("empty image sequence")
    if gt_poses is not None and len(gt_poses) != len(images):
        raise TrackingError(f"{len(gt_poses)} ground-truth poses for {len(images)} frames")
    report = TrajectoryReport()
    for i, img in enumerate(images):
        prior = state.prior
        state, pose = step(state, img)
        res = state.last_result
        errs = {}
        if gt_poses is not None:
            gt = gt_poses[i]
            ref_depth = state.last_ref_depth
            # both as relative transforms from the rendered reference view
            rel_est = se3.compose(se3.inverse(prior), pose)
            rel_gt = se3.compose(se3.inverse(prior), gt)
            errs = dict(
                epe=epe(ref_depth, state.cam, rel_est, rel_gt),
                angular=angular_error(pose, gt),
                translational=translational_error(pose, gt),
            )
        report.frames.append(FrameReport(i, pose, res.converged, res, **errs))
    return state, report
