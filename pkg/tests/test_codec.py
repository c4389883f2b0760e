import numpy as np
import pytest
import torch

from stemcodec import codec, rvq
from stemcodec.codec import CodecConfig, CodecModel, LossWeights, RvqConfig
from stemcodec.dsp import Waveform
from stemcodec.errors import ConfigError
from fdcheck import gradient_check, micro_batch, micro_codec
from oracles import naive_spectral_loss


def tiny_model(strides=(5, 5, 4, 2), rate=6000, seconds=1.0, bc=2, n_cb=8, depth=2, seed=0):
    torch.manual_seed(seed)
    config = CodecConfig(
        strides=strides, base_channels=bc, sample_rate=rate, context_seconds=seconds
    )
    return CodecModel(config, RvqConfig(n_codebooks=depth, codebook_size=n_cb))


class TestConfig:
    def test_default_fold_and_latent_channels(self):
        config = CodecConfig()
        assert config.fold == 200
        assert config.latent_channels == 256
        assert config.context_samples == 88200

    def test_paper_literal_stride_list_needs_divisible_context(self):
        with pytest.raises(ConfigError, match="divisible"):
            CodecConfig(strides=(5, 5, 5, 3))  # 4 s at 22050 is not a multiple of 375
        config = CodecConfig(strides=(5, 5, 5, 3), context_seconds=5.0)
        assert config.fold == 375

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError, match="odd"):
            CodecConfig(kernels=(6, 7, 7, 5))

    def test_compression_factor_matches_reported_value(self):
        # nominal latent rate 110 Hz (22050/200 rounded), 12 codes of 12 bits
        factor = codec.compression_factor(22050, 16, 110.0, 12, 12)
        assert factor == pytest.approx(22.27, abs=0.01)


class TestShapes:
    def test_default_config_latent_length_441(self):
        torch.manual_seed(0)
        model = CodecModel(CodecConfig(), RvqConfig(n_codebooks=2, codebook_size=16)).eval()
        with torch.no_grad():
            latent, skips = model.encode(torch.zeros(1, 1, 88200))
        assert latent.shape == (1, 441, 256)
        assert [s.shape[1] for s in skips] == [16, 32, 64, 128]

    def test_fold_300_gives_294(self):
        torch.manual_seed(0)
        config = CodecConfig(strides=(5, 5, 4, 3), base_channels=2)
        model = CodecModel(config, RvqConfig(n_codebooks=1, codebook_size=4)).eval()
        with torch.no_grad():
            latent, _ = model.encode(torch.zeros(1, 1, 88200))
        assert latent.shape[1] == 294

    def test_decode_output_shape_default(self):
        torch.manual_seed(0)
        model = CodecModel(CodecConfig(), RvqConfig(n_codebooks=1, codebook_size=4)).eval()
        with torch.no_grad():
            latent, skips = model.encode(torch.zeros(1, 1, 88200))
            out = model.decode(latent, skips)
        assert out.shape == (1, 4, 88200)

    @pytest.mark.parametrize("strides", [(5, 5, 4, 2), (5, 5, 4, 3), (5, 5, 5, 3)])
    def test_round_trip_length_across_folds(self, strides):
        model = tiny_model(strides=strides).eval()
        t = model.config.context_samples
        with torch.no_grad():
            latent, skips = model.encode(torch.randn(1, 1, t))
            out = model.decode(latent, skips)
        assert out.shape[-1] == t

    def test_indivisible_length_rejected_with_advice(self):
        model = tiny_model()
        with pytest.raises(ValueError, match="data.chunk"):
            model.encode(torch.zeros(1, 1, 6001))

    def test_zero_input_inference_is_finite(self):
        model = tiny_model().eval()
        with torch.no_grad():
            latent, skips = model.encode(torch.zeros(1, 1, 6000))
            out = model.decode(latent, skips)
        assert torch.isfinite(out).all()

    def test_inference_is_deterministic(self):
        model = tiny_model().eval()
        x = torch.randn(1, 1, 6000)
        with torch.no_grad():
            a = model.decode(*model.encode(x))
            b = model.decode(*model.encode(x))
        assert torch.equal(a, b)


class TestSkips:
    def test_zeroed_skips_equal_no_skips(self):
        model = tiny_model().eval()
        with torch.no_grad():
            latent, skips = model.encode(torch.randn(1, 1, 6000))
            zeroed = [torch.zeros_like(s) for s in skips]
            assert torch.equal(model.decode(latent, zeroed), model.decode(latent, None))

    def test_use_skips_off_ignores_skip_values(self):
        torch.manual_seed(1)
        config = CodecConfig(
            strides=(5, 5, 4, 2), base_channels=2, sample_rate=6000, context_seconds=1.0, use_skips=False
        )
        model = CodecModel(config, RvqConfig(n_codebooks=1, codebook_size=4)).eval()
        with torch.no_grad():
            latent, skips = model.encode(torch.randn(1, 1, 6000))
            perturbed = [s + 100.0 for s in skips]
            assert torch.equal(model.decode(latent, skips), model.decode(latent, perturbed))

    def test_skips_change_output_when_enabled(self):
        model = tiny_model().eval()
        with torch.no_grad():
            latent, skips = model.encode(torch.randn(1, 1, 6000))
            assert not torch.equal(model.decode(latent, skips), model.decode(latent, None))


class TestSpectralLoss:
    def test_identical_inputs_zero(self):
        x = torch.randn(2, 4, 4096, dtype=torch.float64)
        assert codec.spectral_loss(x, x.clone(), 22050).item() == 0.0

    def test_zero_vs_zero_is_zero(self):
        z = torch.zeros(1, 4, 4096)
        assert codec.spectral_loss(z, z.clone(), 22050).item() == 0.0

    def test_sine_vs_silence_matches_independent_oracle(self):
        rate = 22050
        t = np.arange(4096) / rate
        target = np.sin(2 * np.pi * 440 * t)[None, :] * 0.5
        estimate = np.zeros_like(target)
        ours = codec.spectral_loss(
            torch.from_numpy(target), torch.from_numpy(estimate), rate, scales=(64, 128, 256)
        ).item()
        oracle = naive_spectral_loss(target, estimate, rate, scales=(64, 128, 256))
        assert ours == pytest.approx(oracle, rel=1e-9, abs=1e-6)

    def test_too_short_input_rejected(self):
        x = torch.zeros(1, 1, 1024)
        with pytest.raises(ValueError, match="shorter"):
            codec.spectral_loss(x, x, 22050)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            codec.spectral_loss(torch.zeros(1, 2, 4096), torch.zeros(1, 3, 4096), 22050)


class TestReconstructionLoss:
    def test_identical_is_zero(self):
        x = torch.randn(3, 4, 100, dtype=torch.float64)
        assert codec.reconstruction_loss(x, x.clone()).item() == 0.0

    def test_constant_offset_one_source(self):
        x = torch.zeros(1, 1000, dtype=torch.float64)
        assert codec.reconstruction_loss(x, x + 0.1).item() == pytest.approx(0.01, abs=1e-12)

    def test_constant_offset_four_sources(self):
        x = torch.zeros(4, 1000, dtype=torch.float64)
        assert codec.reconstruction_loss(x, x + 0.1).item() == pytest.approx(0.04, abs=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            codec.reconstruction_loss(torch.zeros(1, 10), torch.zeros(1, 11))


class TestForward:
    def forward_pair(self, seed=3):
        model = tiny_model(seed=seed)
        gen = torch.Generator().manual_seed(seed)
        targets = 0.3 * torch.randn(1, 4, 6000, generator=gen)
        mixture = targets.sum(1, keepdim=True)
        return model, mixture, targets

    def test_self_targets_zero_reconstruction_terms(self):
        model, mixture, targets = self.forward_pair()
        model.eval()
        out1 = model(mixture, targets, scales=(64, 128, 256))
        out2 = model(mixture, out1.estimates.detach(), scales=(64, 128, 256))
        assert out2.loss_rec.item() == 0.0
        assert out2.loss_spec.item() == 0.0

    def test_weights_select_terms(self):
        model, mixture, targets = self.forward_pair()
        model.eval()
        out = model(mixture, targets, weights=LossWeights(0.0, 1.0, 0.0), scales=(64, 128, 256))
        assert out.loss_total.item() == out.loss_rec.double().item()

    def test_breakdown_reassembles(self):
        model, mixture, targets = self.forward_pair()
        w = LossWeights(0.7, 3.0, 0.2)
        out = model(mixture, targets, weights=w, scales=(64, 128, 256))
        total = (
            w.spec * out.loss_spec.double() + w.rec * out.loss_rec.double() + w.comm * out.loss_comm.double()
        )
        assert abs(out.loss_total.item() - total.item()) <= 1e-12

    def test_gradients_reach_first_encoder_layer(self):
        model, mixture, targets = self.forward_pair()
        model.train()
        out = model(mixture, targets, scales=(64, 128, 256))
        out.loss_total.backward()
        assert model.pre.weight.grad is not None
        assert model.pre.weight.grad.abs().sum() > 0

    def test_bad_target_shape_rejected(self):
        model, mixture, targets = self.forward_pair()
        with pytest.raises(ValueError, match="targets"):
            model(mixture, targets[:, :3], scales=(64, 128, 256))


class TestGradientCorrectness:
    def test_micro_codec_matches_finite_differences(self):
        model = micro_codec(seed=0)
        mixture, targets = micro_batch(seed=1)
        model.train()
        result = gradient_check(model, mixture, targets, scales=(64, 128, 256))
        assert result.ok, "\n".join(result.failures[:10])
        assert result.checked > 100


class TestClipHelpers:
    def test_separate_clip_shape(self):
        model = tiny_model().eval()
        w = Waveform(np.random.default_rng(0).standard_normal(6000) * 0.1, 6000)
        out = codec.separate_clip(model, w)
        assert out.shape == (4, 6000)

    def test_encode_clip_grid_and_decode_grid(self):
        model = tiny_model().eval()
        w = Waveform(np.random.default_rng(1).standard_normal(6000) * 0.1, 6000)
        latent, skips, grid = codec.encode_clip(model, w)
        assert grid.codes.shape == (6000 // 200, 2)
        stems = codec.decode_grid(model, grid)
        assert stems.shape == (4, 6000)

    def test_rate_mismatch_rejected(self):
        model = tiny_model().eval()
        with pytest.raises(ValueError, match="rate"):
            codec.separate_clip(model, Waveform(np.zeros(6000), 8000))
