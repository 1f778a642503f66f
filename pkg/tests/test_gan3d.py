import numpy as np
import pytest
import torch

import services.gan3d as gan3d
from services.gan3d import (DESK_ARCHITECTURE, FULL_ARCHITECTURE, GanArchitecture, GanTrainConfig, LatentCode,
                            LatentZ, ModulatedConv3d, build_discriminator, build_generator, count_parameters,
                            discriminate, frozen, generate, load_gan, map_latent, r1_penalty, sample_z, save_gan,
                            synthesize, train_gan)
from services.shapegen import make_component_dataset
from tests.conftest import TINY_ARCH
from utils.errors import ArchitectureError, ConfigError, TrainingDivergedError

FULL_SCALE_BUDGET = 2.1e6


class TestArchitecture:
    def test_block_layout(self):
        assert DESK_ARCHITECTURE.block_resolutions == [4, 8, 16, 32]
        assert FULL_ARCHITECTURE.num_blocks == 5

    @pytest.mark.parametrize('resolution', [6, 2])
    def test_rejects_bad_resolution(self, resolution):
        with pytest.raises(ArchitectureError):
            GanArchitecture(resolution=resolution)

    def test_rejects_missing_widths(self):
        with pytest.raises(ArchitectureError):
            GanArchitecture(resolution=64, channel_widths=(8, 8))

    def test_dict_round_trip(self):
        assert GanArchitecture.from_dict(FULL_ARCHITECTURE.to_dict()) == FULL_ARCHITECTURE

    @pytest.mark.parametrize('build', [build_generator, build_discriminator])
    def test_full_scale_parameter_budget(self, build):
        count = count_parameters(build(FULL_ARCHITECTURE))
        assert 0.8 * FULL_SCALE_BUDGET <= count <= 1.2 * FULL_SCALE_BUDGET

    def test_count_single_conv(self):
        assert count_parameters(torch.nn.Conv3d(4, 8, kernel_size=3)) == 3 ** 3 * 4 * 8 + 8 == 872

    def test_count_empty_module(self):
        assert count_parameters(torch.nn.Sequential()) == 0


class TestGenerator:
    def test_output_range_and_shape(self, tiny_gen):
        w = torch.randn(3, TINY_ARCH.d_w) * 50.0
        with torch.no_grad():
            out = tiny_gen.synthesis(w)
        assert out.shape == (3, 8, 8, 8)
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_synthesis_is_bitwise_deterministic(self, tiny_gen):
        z = LatentZ(sample_z(TINY_ARCH.d_z, 1, seed=4)[0], class_id=2)
        w = map_latent(tiny_gen, z)
        a, b = synthesize(tiny_gen, w), synthesize(tiny_gen, w)
        assert np.array_equal(a.data, b.data)
        assert a.resolution == 8

    def test_builds_are_seeded(self):
        a, b = build_generator(TINY_ARCH, seed=3), build_generator(TINY_ARCH, seed=3)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_one_w_feeds_every_layer(self, tiny_gen):
        seen = []
        hooks = [m.affine.register_forward_hook(lambda mod, inputs, out: seen.append(inputs[0].clone()))
                 for m in tiny_gen.modules() if isinstance(m, ModulatedConv3d)]
        w = torch.randn(1, TINY_ARCH.d_w)
        with torch.no_grad():
            tiny_gen.synthesis(w)
        for hook in hooks:
            hook.remove()
        assert len(seen) == 5
        assert all(torch.equal(x, w) for x in seen)

    def test_class_out_of_range(self, tiny_gen):
        with pytest.raises(ArchitectureError):
            tiny_gen(torch.randn(1, TINY_ARCH.d_z), torch.tensor([9]))

    def test_latent_dimension_checked(self, tiny_gen):
        with pytest.raises(ArchitectureError):
            synthesize(tiny_gen, LatentCode(torch.zeros(5)))

    def test_non_finite_latent_rejected(self):
        with pytest.raises(ArchitectureError):
            LatentCode(torch.tensor([0.0, float('nan')]))

    def test_generate_follows_classes(self, tiny_gen):
        grids = generate(tiny_gen, [0, 4, 8], seed=1, batch_size=2)
        assert len(grids) == 3
        assert np.array_equal(grids[1].data, generate(tiny_gen, [0, 4, 8], seed=1, batch_size=2)[1].data)

    def test_frozen_restores_flags(self, tiny_gen):
        with frozen(tiny_gen):
            assert not any(p.requires_grad for p in tiny_gen.parameters())
        assert all(p.requires_grad for p in tiny_gen.parameters())

    def test_zero_mapping_layers_give_zero_latent(self, tiny_gen):
        with torch.no_grad():
            for layer in tiny_gen.mapping.layers:
                layer.weight.zero_()
                layer.bias.zero_()
        for class_id in (0, 8):
            w = map_latent(tiny_gen, LatentZ(sample_z(TINY_ARCH.d_z, 1, seed=2)[0], class_id=class_id))
            assert torch.equal(w.values, torch.zeros(TINY_ARCH.d_w))


class TestDiscriminator:
    def test_single_grid_logit(self, tiny_gen):
        disc = build_discriminator(TINY_ARCH)
        grid = synthesize(tiny_gen, LatentCode(torch.zeros(TINY_ARCH.d_w)))
        assert np.isfinite(discriminate(disc, grid, 3))

    def test_projection_depends_on_class(self):
        disc = build_discriminator(TINY_ARCH)
        grids = torch.rand(2, 8, 8, 8) * 2 - 1
        with torch.no_grad():
            a = disc(grids, torch.tensor([0, 0]))
            b = disc(grids, torch.tensor([5, 5]))
        assert not torch.allclose(a, b)


class TestR1:
    def test_linear_logits(self):
        x = torch.randn(2, 2, 2, 2, requires_grad=True)
        logits = (3.0 * x).sum(dim=(1, 2, 3))
        assert float(r1_penalty(logits, x)) == pytest.approx(9.0 * 8)

    def test_no_graph_gives_zero(self):
        x = torch.randn(2, 4)
        assert float(r1_penalty(x.sum(dim=1), x)) == 0.0


class TestTraining:
    @pytest.fixture(scope='class')
    def dataset(self):
        return make_component_dataset(6, seed=0, resolution=8)

    def quick_config(self, **overrides):
        values = dict(steps=4, batch_size=2, seed=0, log_every=0)
        values.update(overrides)
        return GanTrainConfig(**values)

    def test_short_run_logs_every_step(self, dataset):
        gen, disc, log = train_gan(self.quick_config(), dataset, TINY_ARCH, device=torch.device('cpu'))
        assert len(log) == 4
        assert log.all_finite()
        assert set(log.last()) == {'step', 'loss_d', 'loss_g', 'r1', 'r_t', 'apa_p'}
        assert all(0.0 <= p <= 0.9 for p in log.column('apa_p'))
        assert all(p.requires_grad for p in gen.parameters())

    def test_apa_shares_the_random_stream(self, dataset):
        _, _, with_apa = train_gan(self.quick_config(apa=True), dataset, TINY_ARCH, device=torch.device('cpu'))
        _, _, without = train_gan(self.quick_config(apa=False), dataset, TINY_ARCH, device=torch.device('cpu'))
        assert with_apa.column('loss_d') == without.column('loss_d')
        assert with_apa.column('loss_g') == without.column('loss_g')
        assert all(p == 0.0 for p in without.column('apa_p'))

    def test_apa_probability_moves_in_fixed_steps(self, dataset):
        config = self.quick_config(steps=6, apa_interval=1, apa_step=0.25, apa_max=0.5)
        _, _, log = train_gan(config, dataset, TINY_ARCH, device=torch.device('cpu'))
        for p in log.column('apa_p'):
            assert p in (0.0, 0.25, 0.5)

    def test_apa_probability_follows_the_target(self, dataset):
        # r_t lies in [-1, 1], so these targets fix the direction of every update
        rising = self.quick_config(steps=4, apa_interval=1, apa_step=0.25, apa_max=0.5, apa_target=-2.0)
        falling = self.quick_config(steps=4, apa_interval=1, apa_step=0.25, apa_max=0.5, apa_target=2.0)
        _, _, up = train_gan(rising, dataset, TINY_ARCH, device=torch.device('cpu'))
        _, _, down = train_gan(falling, dataset, TINY_ARCH, device=torch.device('cpu'))
        assert up.column('apa_p') == [0.25, 0.5, 0.5, 0.5]
        assert down.column('apa_p') == [0.0, 0.0, 0.0, 0.0]

    def test_non_finite_loss_aborts_with_snapshot(self, dataset, monkeypatch, tmp_path):
        monkeypatch.setattr(gan3d, 'r1_penalty', lambda logits, inputs: logits.new_tensor(float('nan')))
        config = self.quick_config(snapshot_path=str(tmp_path / 'snap.pt'))
        with pytest.raises(TrainingDivergedError) as excinfo:
            train_gan(config, dataset, TINY_ARCH, device=torch.device('cpu'))
        assert excinfo.value.snapshot['step'] == 0
        assert (tmp_path / 'snap.pt').exists()

    def test_resolution_mismatch(self):
        dataset = make_component_dataset(2, seed=0, resolution=16)
        with pytest.raises(ArchitectureError):
            train_gan(self.quick_config(), dataset, TINY_ARCH, device=torch.device('cpu'))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            GanTrainConfig(steps=0)


class TestCheckpoint:
    def test_save_load_preserves_outputs(self, tiny_gen, tmp_path):
        disc = build_discriminator(TINY_ARCH)
        path = save_gan(tmp_path / 'gan.pt', tiny_gen, disc, step=7, seed=1)
        gen2, disc2, meta = load_gan(path, device=torch.device('cpu'))
        assert meta['step'] == 7 and meta['architecture'] == TINY_ARCH
        w = LatentCode(torch.randn(TINY_ARCH.d_w))
        assert np.array_equal(synthesize(tiny_gen, w).data, synthesize(gen2, w).data)

    def test_wrong_kind_rejected(self, tmp_path):
        from services.comparator import build_comparator, save_comparator
        path = save_comparator(tmp_path / 'comp.pt', build_comparator())
        with pytest.raises(ConfigError):
            load_gan(path)
