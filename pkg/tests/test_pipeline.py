from pathlib import Path

import numpy as np
import pytest
import torch

from dragedit.codec import LatentVideo, VideoFrames, load_latent, save_frames
from dragedit.demo import synthetic_blob_video
from dragedit.drag import OptimizationConfig
from dragedit.errors import InstructionError, StageError
from dragedit.instruction import DragInstruction, KeyframeAnnotation, MaskVideo, PropagatedInstruction
from dragedit.lora import LoRATrainConfig
from dragedit.msa import MsaPlan
from dragedit.pipeline import (
    MODE_PER_FRAME,
    MODE_VIDEO,
    Engine,
    Project,
    RunConfig,
    preprocess,
    propagate,
    run_full,
    set_instruction,
    train_lora_stage,
)


def tiny_run_config(mode=MODE_VIDEO, lora_enabled=True, msa_enabled=True, seed=None):
    return RunConfig(
        opt=OptimizationConfig(max_steps=3, t_opt=8),
        lora=LoRATrainConfig(epochs=2, batch_size=2, rank=4),
        msa=MsaPlan(),
        lora_enabled=lora_enabled,
        msa_enabled=msa_enabled,
        mode=mode,
        inversion_steps=12,
        seed=seed,
    )


def tiny_source_video():
    return synthetic_blob_video(frames=12, height=48, width=48, fps=12.0,
                                start=(12.0, 24.0), step=(2.0, 0.0), sigma=4.0)


def make_ready_project(tmp_path: Path, project_id="p1", seed=0, drag_px=6.0) -> Project:
    """Project preprocessed, lora-staged, instructed, and propagated."""
    video = tiny_source_video()
    staging = tmp_path / f"_src_{project_id}"
    save_frames(video, staging)
    project = Project.create(tmp_path, project_id=project_id, seed=seed)
    processed = preprocess(project, staging, kps=6.0, source_fps=video.fps)
    train_lora_stage(project, tiny_run_config(seed=seed))
    l = processed.length
    first = (12.0, 24.0)
    last = (12.0 + 4.0 * (l - 1), 24.0)
    instruction = DragInstruction(
        frames=l, extension_radius=2,
        first=KeyframeAnnotation(pairs=[(first, (first[0] + drag_px, first[1]))]),
        last=KeyframeAnnotation(pairs=[(last, (last[0] + drag_px, last[1]))]),
    )
    set_instruction(project, instruction)
    propagate(project)
    return project


class TestPreprocess:
    def test_kps_resampling_arithmetic(self, tmp_path):
        # 24 fps, 2 s clip, kps 6 -> 12 frames
        rng = np.random.default_rng(0)
        video = VideoFrames(rng.uniform(0, 255, (48, 32, 32, 3)), fps=24.0)
        src = tmp_path / "src"
        save_frames(video, src)
        project = Project.create(tmp_path, project_id="pp")
        processed = preprocess(project, src, kps=6.0, source_fps=24.0)
        assert processed.length == 12
        assert processed.fps == 6.0
        assert project.status == "preprocessed"
        assert len(list(project.frames_dir.glob("frame_*.png"))) == 12

    def test_kps_above_source_fps_rejected(self, tmp_path):
        video = tiny_source_video()
        src = tmp_path / "src"
        save_frames(video, src)
        project = Project.create(tmp_path, project_id="pp2")
        with pytest.raises(StageError, match="kps"):
            preprocess(project, src, kps=50.0, source_fps=video.fps)

    def test_reprocess_overwrites_deterministically(self, tmp_path):
        video = tiny_source_video()
        src = tmp_path / "src"
        save_frames(video, src)
        project = Project.create(tmp_path, project_id="pp3")
        preprocess(project, src, kps=6.0, source_fps=video.fps)
        first_hash = project.state["video_hash"]
        preprocess(project, src, kps=6.0, source_fps=video.fps)
        assert project.state["video_hash"] == first_hash

    def test_odd_resolution_resized_to_divisible(self, tmp_path):
        rng = np.random.default_rng(1)
        video = VideoFrames(rng.uniform(0, 255, (6, 37, 45, 3)), fps=6.0)
        src = tmp_path / "src"
        save_frames(video, src)
        project = Project.create(tmp_path, project_id="pp4")
        processed = preprocess(project, src, kps=3.0, source_fps=6.0)
        assert processed.size == (32, 40)

    def test_npz_source(self, tmp_path):
        video = tiny_source_video()
        src = tmp_path / "clip.npz"
        np.savez(src, frames=video.as_uint8(), fps=video.fps)
        project = Project.create(tmp_path, project_id="pp5")
        processed = preprocess(project, src, kps=6.0)
        assert processed.length == 6


class TestStatusMachine:
    def test_run_before_propagate_is_ordering_error(self, tmp_path):
        project = Project.create(tmp_path, project_id="s1")
        with pytest.raises(StageError, match="status"):
            run_full(project, tiny_run_config())

    def test_instruction_requires_lora_stage(self, tmp_path):
        video = tiny_source_video()
        src = tmp_path / "src"
        save_frames(video, src)
        project = Project.create(tmp_path, project_id="s2")
        preprocess(project, src, kps=6.0, source_fps=video.fps)
        instr = DragInstruction(
            frames=6, extension_radius=0,
            first=KeyframeAnnotation(pairs=[((12.0, 24.0), (18.0, 24.0))]),
            last=KeyframeAnnotation(pairs=[((32.0, 24.0), (38.0, 24.0))]),
        )
        with pytest.raises(StageError, match="lora_trained"):
            set_instruction(project, instr)

    def test_instruction_frame_count_must_match(self, tmp_path):
        project = make_ready_project(tmp_path, "s3")
        bad = DragInstruction(
            frames=5, extension_radius=0,
            first=KeyframeAnnotation(pairs=[((12.0, 24.0), (18.0, 24.0))]),
            last=KeyframeAnnotation(pairs=[((32.0, 24.0), (38.0, 24.0))]),
        )
        with pytest.raises(InstructionError, match="frames"):
            set_instruction(project, bad)


class TestRunFull:
    def test_video_mode_products(self, tmp_path):
        project = make_ready_project(tmp_path, "r1")
        result = run_full(project, tiny_run_config())
        assert project.status == "done"
        assert result.edited.length == 6
        assert (project.result_dir / "edited" / "frame_00000.png").exists()
        assert (project.result_dir / "reconstruction" / "frame_00000.png").exists()
        assert project.audit_path.exists()
        assert project.report_csv.exists()
        header, row = project.report_csv.read_text().strip().splitlines()
        assert header == "sample,baseline_score,dragvideo_score"
        assert row.startswith("r1,")
        assert np.isfinite(result.score)

    def test_rerun_with_same_config_hits_caches(self, tmp_path):
        project = make_ready_project(tmp_path, "r2")
        cfg = tiny_run_config()
        first = run_full(project, cfg)
        stamp = (project.root / "drag" / "edited.bin").stat().st_mtime_ns
        second = run_full(project, cfg)
        assert (project.root / "drag" / "edited.bin").stat().st_mtime_ns == stamp
        assert np.array_equal(first.edited.frames, second.edited.frames)

    def test_config_change_invalidates_downstream(self, tmp_path):
        project = make_ready_project(tmp_path, "r3")
        run_full(project, tiny_run_config())
        lora_stamp = (project.root / "lora" / "lora.bin").stat().st_mtime_ns
        drag_stamp = (project.root / "drag" / "edited.bin").stat().st_mtime_ns
        cfg2 = tiny_run_config()
        cfg2.opt = OptimizationConfig(max_steps=2, t_opt=8, eta=0.02)
        run_full(project, cfg2)
        # optimization change re-runs drag but not lora
        assert (project.root / "lora" / "lora.bin").stat().st_mtime_ns == lora_stamp
        assert (project.root / "drag" / "edited.bin").stat().st_mtime_ns != drag_stamp

    def test_resumed_run_is_bit_identical(self, tmp_path):
        cfg = tiny_run_config()
        full = make_ready_project(tmp_path / "a", "proj", seed=3)
        run_full(full, cfg)

        resumed = make_ready_project(tmp_path / "b", "proj", seed=3)
        engine = Engine(resumed, cfg)

        # simulate a kill after the inversion stage by failing inside drag
        original_stage_drag = Engine.stage_drag

        def exploding(self, *args, **kwargs):
            raise RuntimeError("killed")

        Engine.stage_drag = exploding
        try:
            with pytest.raises(StageError):
                engine.run_full()
        finally:
            Engine.stage_drag = original_stage_drag
        assert resumed.status == "failed"
        assert (resumed.root / "trajectory" / "stage.json").exists()
        assert not (resumed.root / "drag").exists()

        resumed.set_status("propagated")
        run_full(resumed, cfg)

        for rel in ("drag/edited.bin", "denoised/edited.bin", "denoised/original.bin"):
            assert (full.root / rel).read_bytes() == (resumed.root / rel).read_bytes(), rel
        full_frames = sorted((full.result_dir / "edited").glob("*.png"))
        resumed_frames = sorted((resumed.result_dir / "edited").glob("*.png"))
        assert [p.read_bytes() for p in full_frames] == [p.read_bytes() for p in resumed_frames]

    def test_failed_stage_names_stage(self, tmp_path):
        project = make_ready_project(tmp_path, "r5")
        cfg = tiny_run_config()
        cfg.opt = OptimizationConfig(max_steps=3, t_opt=13)  # beyond the 12-step schedule
        with pytest.raises(Exception) as err:
            run_full(project, cfg)
        assert "t_opt" in str(err.value) or "trajectory" in str(err.value)


class TestAblations:
    def test_lora_and_msa_switches_change_output(self, tmp_path):
        project = make_ready_project(tmp_path, "ab1")
        base = run_full(project, tiny_run_config())
        no_lora = run_full(project, tiny_run_config(lora_enabled=False))
        no_msa = run_full(project, tiny_run_config(msa_enabled=False))
        assert not np.array_equal(base.edited.frames, no_lora.edited.frames)
        assert not np.array_equal(base.edited.frames, no_msa.edited.frames)
        assert project.status == "done"

    def test_disabled_lora_uses_zero_deltas(self, tmp_path):
        project = make_ready_project(tmp_path, "ab2")
        engine = Engine(project, tiny_run_config(lora_enabled=False))
        z0 = load_latent(project.latent_prefix)
        weights, _ = engine.stage_lora(z0, project.root / "lora_off" / "lora", 99)
        for name in weights.target_names:
            assert float(weights.pairs[name][1].abs().max()) == 0.0


class TestPerFrameBaseline:
    def test_baseline_mode_runs_and_reports(self, tmp_path):
        project = make_ready_project(tmp_path, "b1")
        result = run_full(project, tiny_run_config(mode=MODE_PER_FRAME))
        assert result.mode == MODE_PER_FRAME
        assert result.edited.length == 6
        row = project.report_csv.read_text().strip().splitlines()[1]
        cells = row.split(",")
        assert cells[1] != ""  # baseline column filled
        # follow-up video run fills the other column of the same report
        run_full(project, tiny_run_config())
        row = project.report_csv.read_text().strip().splitlines()[1]
        assert "" not in row.split(",")

    def test_single_frame_video_equals_video_mode_exactly(self, tmp_path):
        project = make_ready_project(tmp_path, "b2", seed=11)
        z0 = load_latent(project.latent_prefix)
        z1 = LatentVideo(z0.data[:1].clone(), z0.scale_factor)
        handles = np.array([[[12.0, 24.0]]])
        targets = np.array([[[18.0, 24.0]]])
        mask = np.zeros((1, 48, 48), dtype=bool)
        mask[0, 12:36, 4:32] = True
        prop1 = PropagatedInstruction(handles, targets, MaskVideo.from_pixel(mask, 8))

        cfg = tiny_run_config(seed=11)
        engine = Engine(project, cfg)
        from dragedit.utils import derive_seed

        base_seed = derive_seed(engine.seed, "lora")
        video_flow = engine.run_video_flow(z1, prop1, tmp_path / "video_mode", base_seed, scope="video")
        frame_flow = engine.run_video_flow(z1, prop1.slice_frame(0), tmp_path / "frame_mode",
                                           base_seed + 0, scope="frame:0")
        assert torch.equal(video_flow["edited"].data, frame_flow["edited"].data)
        assert torch.equal(video_flow["original"].data, frame_flow["original"].data)
