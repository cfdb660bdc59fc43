import math

import numpy as np
import pytest
import torch

from conftest import finite_difference_grads, max_relative_error, random_image
from shadowseg.backbone import (LevelTokens, TextReference, TokenPyramid,
                                toy_config, toy_encode)
from shadowseg.consistency import (ProjectionSet, build_consistency_maps,
                                   cls_text_score, patch_cls_scores,
                                   patch_text_scores, project_unit)
from shadowseg.errors import ConfigurationError, DegenerateProjectionError


def unit(v):
    v = torch.as_tensor(v, dtype=torch.float64)
    return v / v.norm()


class TestProjectUnit:
    def test_three_four_five(self):
        eye = torch.eye(2, dtype=torch.float64)
        out = project_unit(torch.tensor([3.0, 4.0], dtype=torch.float64), eye)
        assert torch.allclose(out, torch.tensor([0.6, 0.8], dtype=torch.float64))

    def test_unit_vector_unchanged(self):
        eye = torch.eye(3, dtype=torch.float64)
        v = unit([1.0, 2.0, 2.0])
        assert torch.allclose(project_unit(v, eye), v)

    def test_scaling_weight_is_irrelevant(self):
        v = torch.tensor([3.0, 4.0], dtype=torch.float64)
        eye = torch.eye(2, dtype=torch.float64)
        assert torch.allclose(project_unit(v, 2.0 * eye), project_unit(v, eye))

    def test_batched_rows_normalized(self, rng):
        w = torch.tensor(rng.normal(size=(5, 7)))
        vs = torch.tensor(rng.normal(size=(10, 7)))
        out = project_unit(vs, w)
        assert torch.allclose(out.norm(dim=-1), torch.ones(10, dtype=torch.float64),
                              atol=1e-12)

    def test_degenerate_raises(self):
        with pytest.raises(DegenerateProjectionError):
            project_unit(torch.zeros(4, dtype=torch.float64),
                         torch.eye(4, dtype=torch.float64))


class TestScores:
    def test_identical_units_score_one(self):
        v = unit([1.0, 1.0, 0.0])
        assert float(cls_text_score(v, v, 1.0)) == pytest.approx(1.0)

    def test_orthogonal_score_zero(self):
        a = torch.tensor([1.0, 0.0], dtype=torch.float64)
        b = torch.tensor([0.0, 1.0], dtype=torch.float64)
        assert float(cls_text_score(a, b, 7.3)) == pytest.approx(0.0)

    def test_cosine_half_with_scale_two(self):
        a = torch.tensor([1.0, 0.0], dtype=torch.float64)
        b = torch.tensor([0.5, math.sqrt(3) / 2], dtype=torch.float64)
        assert float(cls_text_score(a, b, 2.0)) == pytest.approx(1.0, abs=1e-12)

    def test_patch_cls_all_equal_reference(self):
        ref = unit([0.3, -0.2, 0.9])
        patches = ref.expand(6, 3)
        out = patch_cls_scores(patches, ref, 1.0)
        assert torch.allclose(out, torch.ones(6, dtype=torch.float64))

    def test_zero_scale_zeroes_scores(self, rng):
        patches = torch.tensor(rng.normal(size=(6, 3)))
        patches = patches / patches.norm(dim=-1, keepdim=True)
        out = patch_text_scores(patches, unit([1.0, 0.0, 0.0]), 0.0)
        assert torch.equal(out, torch.zeros(6, dtype=torch.float64))

    @pytest.mark.parametrize("fn", [patch_cls_scores, patch_text_scores])
    def test_matches_per_patch_loop(self, fn, rng):
        patches = torch.tensor(rng.normal(size=(17, 5)))
        patches = patches / patches.norm(dim=-1, keepdim=True)
        ref = unit(rng.normal(size=5))
        scale = 3.7
        out = fn(patches, ref, scale)
        for j in range(17):
            expected = scale * float((patches[j] * ref).sum())
            assert float(out[j]) == pytest.approx(expected, abs=1e-12)


def tiny_pyramid(rng, n=4, d=6, k=2):
    levels = [LevelTokens(cls=torch.tensor(rng.normal(size=d)),
                          patches=torch.tensor(rng.normal(size=(n, d))))
              for _ in range(k)]
    return TokenPyramid(levels=levels,
                        shallow_patches=torch.tensor(rng.normal(size=(n, d))))


def tiny_text(rng, dt=5):
    v = torch.tensor(rng.normal(size=dt))
    return TextReference(prompts=["p"], embedding=v / v.norm())


class TestBuildConsistencyMaps:
    def test_patches_equal_cls_with_shared_projection(self, rng):
        d = 6
        cls = torch.tensor(rng.normal(size=d))
        pyramid = TokenPyramid(
            levels=[LevelTokens(cls=cls, patches=cls.expand(4, d))],
            shallow_patches=torch.zeros(4, d, dtype=torch.float64),
        )
        proj = ProjectionSet(d, 5, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            proj.patch_proj.copy_(proj.cls_proj)
        maps = build_consistency_maps(pyramid, tiny_text(rng), proj)
        alpha = float(proj.patch_cls_scale.detach())
        assert torch.allclose(maps.layers[0].patch_cls,
                              torch.full((4,), alpha, dtype=torch.float64))

    def test_matches_manual_composition(self, rng):
        pyramid = tiny_pyramid(rng)
        text = tiny_text(rng)
        proj = ProjectionSet(6, 5, generator=torch.Generator().manual_seed(1))
        maps = build_consistency_maps(pyramid, text, proj)
        t_hat = project_unit(text.embedding, proj.text_proj)
        for level, layer in zip(pyramid.levels, maps.layers):
            c_hat = project_unit(level.cls, proj.cls_proj)
            p_hat = project_unit(level.patches, proj.patch_proj)
            assert torch.allclose(layer.cls_text,
                                  cls_text_score(c_hat, t_hat, proj.cls_text_scale))
            assert torch.allclose(layer.patch_cls,
                                  patch_cls_scores(p_hat, c_hat, proj.patch_cls_scale))
            assert torch.allclose(layer.patch_text,
                                  patch_text_scores(p_hat, t_hat, proj.patch_text_scale))

    def test_dimension_mismatch_rejected(self, rng):
        proj = ProjectionSet(8, 5)
        with pytest.raises(ConfigurationError):
            build_consistency_maps(tiny_pyramid(rng, d=6), tiny_text(rng), proj)

    def test_input_scale_invariance(self, rng):
        # positive rescaling of any raw token or the text embedding is a no-op
        pyramid = tiny_pyramid(rng)
        text = tiny_text(rng)
        proj = ProjectionSet(6, 5, generator=torch.Generator().manual_seed(2))
        base = build_consistency_maps(pyramid, text, proj)
        scaled_pyramid = TokenPyramid(
            levels=[LevelTokens(cls=3.7 * l.cls, patches=0.25 * l.patches)
                    for l in pyramid.levels],
            shallow_patches=pyramid.shallow_patches,
        )
        scaled_text = TextReference(prompts=text.prompts, embedding=11.0 * text.embedding)
        scaled = build_consistency_maps(scaled_pyramid, scaled_text, proj)
        for a, b in zip(base.layers, scaled.layers):
            assert torch.allclose(a.cls_text, b.cls_text, atol=1e-10)
            assert torch.allclose(a.patch_cls, b.patch_cls, atol=1e-10)
            assert torch.allclose(a.patch_text, b.patch_text, atol=1e-10)

    def test_boundedness_random_inputs(self, toy_cfg, rng):
        proj = ProjectionSet(32, 24, generator=torch.Generator().manual_seed(3))
        for trial in range(10):
            pyramid = toy_encode(random_image(rng), toy_cfg)
            v = torch.tensor(rng.normal(size=24))
            text = TextReference(prompts=["p"], embedding=v / v.norm())
            with torch.no_grad():
                maps = build_consistency_maps(pyramid, text, proj)
                for layer in maps.layers:
                    assert abs(float(layer.cls_text)) <= \
                        abs(float(proj.cls_text_scale)) * (1 + 1e-9)
                    assert layer.patch_cls.abs().max() <= \
                        proj.patch_cls_scale.abs() * (1 + 1e-9)
                    assert layer.patch_text.abs().max() <= \
                        proj.patch_text_scale.abs() * (1 + 1e-9)


class TestGradients:
    def test_score_gradients_match_finite_differences(self, rng):
        pyramid = tiny_pyramid(rng, n=3, d=4, k=2)
        text = tiny_text(rng, dt=3)
        proj = ProjectionSet(4, 3, generator=torch.Generator().manual_seed(4))
        # random linear functional of all scores exercises every parameter
        coeff = [torch.tensor(rng.normal(size=3)) for _ in range(2)]
        coeff_cls = [float(c) for c in rng.normal(size=2)]

        def functional():
            maps = build_consistency_maps(pyramid, text, proj)
            out = sum(c * l.cls_text for c, l in zip(coeff_cls, maps.layers))
            out = out + sum((w * (l.patch_cls + l.patch_text)).sum()
                            for w, l in zip(coeff, maps.layers))
            return out

        params = list(proj.parameters())
        loss = functional()
        analytic = torch.autograd.grad(loss, params)
        numeric = finite_difference_grads(lambda: float(functional().detach()), params)
        assert max_relative_error(analytic, numeric) <= 1e-4
