import numpy as np
import pytest

from geoedit import imaging
from geoedit.geometry import AffineParams, DepthMap, Rotation3DParams
from geoedit.imaging import DimensionMismatch, ImageBuffer, MaskBuffer
from geoedit.instructions import EditInstruction
from geoedit.pipeline import (
    ComposePart,
    EditRequest,
    EditResult,
    Editor,
    boundary_radius,
    compose,
    inpaint_dilation_radius,
)
from geoedit.sampler import SamplerConfig

CFG = SamplerConfig(steps=4, seed=3)


@pytest.fixture(scope="module")
def sample(shapes32):
    return shapes32[0].image, shapes32[0].mask


class TestEditRequest:
    def test_empty_mask_rejected(self, sample):
        img, _ = sample
        with pytest.raises(ValueError):
            EditRequest(image=img, source_mask=MaskBuffer(np.zeros((32, 32), np.uint8)),
                        affine=AffineParams())

    def test_exactly_one_transform(self, sample):
        img, mask = sample
        with pytest.raises(ValueError):
            EditRequest(image=img, source_mask=mask)
        with pytest.raises(ValueError):
            EditRequest(image=img, source_mask=mask, affine=AffineParams(),
                        rotation=Rotation3DParams("y", 5.0))

    def test_dimension_checks(self, sample):
        img, mask = sample
        with pytest.raises(DimensionMismatch):
            EditRequest(image=img, source_mask=MaskBuffer(np.ones((16, 16), np.uint8)),
                        affine=AffineParams())
        with pytest.raises(DimensionMismatch):
            EditRequest(image=img, source_mask=mask, affine=AffineParams(),
                        completion_mask=MaskBuffer(np.ones((16, 16), np.uint8)))


class TestScaledRadii:
    def test_inpaint_dilation_tracks_resolution(self):
        assert inpaint_dilation_radius(512, 512) == 30
        assert inpaint_dilation_radius(64, 64) == 4
        assert inpaint_dilation_radius(32, 32) == 2

    def test_boundary_radius(self):
        assert boundary_radius(64, 64) == 3
        assert boundary_radius(512, 512) == 24
        assert boundary_radius(16, 16) == 1


class TestSteps:
    def test_step1_dispatch_2d(self, tiny_editor, sample):
        img, mask = sample
        req = EditRequest(image=img, source_mask=mask,
                          instruction=EditInstruction("move", "right", 0.08, "easy"), config=CFG)
        coarse, target = tiny_editor.step1_transform(req)
        assert target.data.sum() > 0
        assert coarse.data.shape == img.data.shape

    def test_step1_dispatch_3d(self, tiny_editor, sample):
        img, mask = sample
        req = EditRequest(image=img, source_mask=mask,
                          instruction=EditInstruction("rotate3d", "y", 8.0, "easy"),
                          depth=DepthMap(np.full((32, 32), 2.0)), config=CFG)
        coarse, target = tiny_editor.step1_transform(req)
        assert target.data.sum() > 0

    def test_step1_3d_requires_depth(self, tiny_editor, sample):
        img, mask = sample
        req = EditRequest(image=img, source_mask=mask,
                          instruction=EditInstruction("rotate3d", "y", 8.0, "easy"), config=CFG)
        with pytest.raises(ValueError):
            tiny_editor.step1_transform(req)

    def test_step2_rejects_empty_mask(self, tiny_editor, sample):
        img, _ = sample
        with pytest.raises(ValueError):
            tiny_editor.step2_inpaint(img, MaskBuffer(np.zeros((32, 32), np.uint8)), config=CFG)

    def test_step2_full_mask_warns(self, tiny_editor, sample):
        img, _ = sample
        with pytest.warns(UserWarning):
            tiny_editor.step2_inpaint(img, MaskBuffer(np.ones((32, 32), np.uint8)), config=CFG)

    def test_step2_empty_prompt_disables_guidance(self, tiny_editor, sample):
        img, mask = sample
        out, _ = tiny_editor.step2_inpaint(img, mask, prompt="", config=CFG)
        assert out.data.shape == img.data.shape

    def test_step3_runs_with_completion(self, tiny_editor, sample):
        img, mask = sample
        completion = MaskBuffer(np.pad(np.ones((6, 6), np.uint8), ((0, 26), (0, 26))))
        out, keys = tiny_editor.step3_refine(
            img, img, mask, mask, completion_mask=completion, prompt="a red circle", config=CFG
        )
        assert out.data.shape == img.data.shape
        assert "composite" in keys


class TestFullEdit:
    def test_identity_replay_bit_equal(self, tiny_editor, sample):
        img, mask = sample
        res = tiny_editor.edit(EditRequest(image=img, source_mask=mask,
                                           affine=AffineParams(), config=CFG))
        assert np.array_equal(res.refined.data, img.data)
        assert res.config_snapshot["identity_replay"] is True

    def test_noop_replay_direct(self, tiny_editor, sample):
        img, _ = sample
        assert np.array_equal(tiny_editor.noop_replay(img, CFG).data, img.data)

    def test_edit_deterministic_and_consistent(self, tiny_editor, sample):
        img, mask = sample
        req = lambda: EditRequest(image=img, source_mask=mask,
                                  instruction=EditInstruction("move", "right", 0.08, "easy"),
                                  config=CFG)
        a = tiny_editor.edit(req())
        b = tiny_editor.edit(req())
        for name in ("coarse", "background", "composite", "refined"):
            assert np.array_equal(getattr(a, name).data, getattr(b, name).data), name
        # blend equation recheckable post hoc from stored buffers
        recheck = imaging.blend(a.coarse, a.background, a.target_mask)
        assert np.array_equal(recheck.data, a.composite.data)
        assert set(a.durations) == {"step1", "step2", "step3"}

    def test_target_full_mask_union(self, tiny_editor, sample):
        img, mask = sample
        completion = MaskBuffer(np.pad(np.ones((5, 5), np.uint8), ((27, 0), (27, 0))))
        res = tiny_editor.edit(EditRequest(
            image=img, source_mask=mask,
            instruction=EditInstruction("move", "left", 0.08, "easy"),
            completion_mask=completion, config=CFG,
        ))
        expected = imaging.mask_union(res.target_mask, completion)
        assert np.array_equal(res.target_full_mask.data, expected.data)

    def test_save_load_round_trip(self, tiny_editor, sample, tmp_path):
        img, mask = sample
        res = tiny_editor.edit(EditRequest(image=img, source_mask=mask,
                                           instruction=EditInstruction("resize", "shrink", 0.85, "easy"),
                                           config=CFG))
        res.save(tmp_path / "out")
        back = EditResult.load(tmp_path / "out")
        assert np.array_equal(back.target_mask.data, res.target_mask.data)
        assert np.abs(back.refined.data - res.refined.data).max() <= 1 / 255 + 1e-6
        assert back.config_snapshot == res.config_snapshot

    def test_out_of_bounds_propagates(self, tiny_editor, sample):
        from geoedit.geometry import OutOfBoundsError

        img, mask = sample
        with pytest.raises(OutOfBoundsError):
            tiny_editor.edit(EditRequest(image=img, source_mask=mask,
                                         affine=AffineParams(t_x=100.0), config=CFG))

    def test_extra_perturb_accepted(self, tiny_editor, sample):
        img, mask = sample
        extra = MaskBuffer(np.pad(np.ones((4, 4), np.uint8), ((0, 28), (28, 0))))
        res = tiny_editor.edit(EditRequest(
            image=img, source_mask=mask,
            instruction=EditInstruction("move", "down", 0.08, "easy"),
            extra_perturb=extra, config=CFG,
        ))
        assert res.refined.data.shape == img.data.shape


class TestCaching:
    def test_inversion_cache_reused(self, tiny_model, tiny_schedule, sample, tmp_path):
        img, mask = sample
        editor = Editor(tiny_model, tiny_schedule, cache_dir=tmp_path)
        instr = EditInstruction("move", "right", 0.08, "easy")
        a = editor.edit(EditRequest(image=img, source_mask=mask, instruction=instr, config=CFG))
        files_after_first = sorted(p.name for p in tmp_path.iterdir())
        b = editor.edit(EditRequest(image=img, source_mask=mask, instruction=instr, config=CFG))
        files_after_second = sorted(p.name for p in tmp_path.iterdir())
        assert files_after_first == files_after_second
        assert np.array_equal(a.refined.data, b.refined.data)
        assert a.cache_keys == b.cache_keys


class TestExtendedApplications:
    def test_appearance_transfer_deterministic(self, tiny_editor, shapes32):
        a, b = shapes32[0], shapes32[1]
        out1 = tiny_editor.appearance_transfer(a.image, a.mask, b.image, b.mask,
                                               label="a blue square", config=CFG)
        out2 = tiny_editor.appearance_transfer(a.image, a.mask, b.image, b.mask,
                                               label="a blue square", config=CFG)
        assert np.array_equal(out1.data, out2.data)

    def test_compose_with_removal_and_labels(self, tiny_editor, shapes32):
        canvas = shapes32[2]
        part_src = shapes32[0]
        target = MaskBuffer(np.pad(np.ones((8, 8), np.uint8), ((20, 4), (20, 4))))
        out = compose(
            tiny_editor,
            canvas.image,
            [ComposePart(part_src.image, part_src.mask, target, label="a red circle")],
            removals=[canvas.mask],
            config=CFG,
        )
        assert out.data.shape == canvas.image.data.shape

    def test_compose_dimension_check(self, tiny_editor, shapes32):
        canvas = shapes32[2]
        small = ImageBuffer(np.zeros((16, 16, 3), np.float32))
        with pytest.raises(DimensionMismatch):
            compose(tiny_editor, canvas.image,
                    [ComposePart(small, MaskBuffer(np.ones((16, 16), np.uint8)),
                                 MaskBuffer(np.ones((32, 32), np.uint8)))],
                    config=CFG)
