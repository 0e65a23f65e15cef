"""Executes one offloadable task; shared by the local executor and the server."""

from __future__ import annotations

import time
from typing import Optional

from .config import Settings
from .pso import FrameContext, frame_config, init_swarm, run_phase
from .transport.codec import ProtocolError, StepRequest, StepResult, TaskKind, dequantize_depth


def execute_step(req: StepRequest, settings: Settings, trace: Optional[list] = None) -> StepResult:
    started = time.perf_counter()
    cfg = frame_config(settings.pso, req.seed, req.frames_skipped)
    obs = dequantize_depth(req.depth_mm)
    ctx = FrameContext.for_center(req.center, obs, settings.objective, settings.geometry, settings.camera,
                                  req.frame_index, trace)
    if req.kind == TaskKind.FUSED_FRAME:
        s = init_swarm(req.center, cfg, settings.geometry, req.frame_index)
        for _ in range(cfg.phases):
            s = run_phase(s, ctx, cfg)
        keep = None
    else:
        if req.phase_index >= cfg.phases:
            raise ProtocolError(f"phase_index {req.phase_index} out of range")
        if req.phase_index == 0:
            s = init_swarm(req.center, cfg, settings.geometry, req.frame_index)
        else:
            if req.swarm.phase_index != req.phase_index:
                raise ProtocolError(f"swarm is at phase {req.swarm.phase_index}, request says {req.phase_index}")
            if req.swarm.swarm_size != cfg.swarm_size:
                raise ProtocolError("swarm size differs from the registered configuration")
            s = req.swarm
        s = run_phase(s, ctx, cfg)
        keep = s if req.phase_index < cfg.phases - 1 else None
    exec_us = int(round((time.perf_counter() - started) * 1e6))
    return StepResult(
        frame_index=req.frame_index,
        phase_index=s.phase_index - 1,
        gbest_position=s.gbest_position.copy(),
        gbest_score=s.gbest_score,
        exec_us=min(exec_us, 2**32 - 1),
        swarm=keep,
    )
