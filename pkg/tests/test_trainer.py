import math

import numpy as np
import pytest

from mdemil import autodiff as ad
from mdemil.autodiff import Tape, Tensor
from mdemil.errors import DimensionError, NumericalError, SpecError
from mdemil.model import forward_pair, predict
from mdemil.trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    fit_bags,
    load_fit,
    lr_at,
    save_fit,
    total_loss,
    trainable_parameters,
)

from conftest import TINY_NAMES, numeric_grad, rel_error, tiny_config, tiny_model, toy_bags


def loss_value(bundle, bank, cfg, xu, xb, yu=0, yb=2):
    out = forward_pair(bundle, xu, xb)
    return total_loss(out, yu, yb, bundle, bank, cfg)


class TestConfig:
    def test_round_trip(self):
        cfg = TrainConfig(alpha=0.3, lam=0.7, seeds=(4, 5))
        back = TrainConfig.from_dict(cfg.to_dict())
        assert back == cfg
        assert cfg.to_dict()["lambda"] == 0.7

    def test_unknown_key(self):
        with pytest.raises(SpecError, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})

    @pytest.mark.parametrize("change", [
        {"alpha": -1}, {"epochs": 0}, {"warmup_epochs": 60}, {"ensemble": "triple"},
        {"aggregator": "max"}, {"fusion": "vote"}, {"base_lr": 0}, {"accumulate": 0}, {"seeds": ()},
    ])
    def test_invalid(self, change):
        with pytest.raises(SpecError):
            TrainConfig(**change).validate()

    def test_hash_tracks_content(self):
        a = TrainConfig()
        assert a.config_hash() == TrainConfig().config_hash()
        assert a.config_hash() != TrainConfig(alpha=0.2).config_hash()
        assert len(a.config_hash()) == 10


class TestTotalLoss:
    def test_zero_weights_reduce_to_classification(self, rng):
        bundle, bank = tiny_model()
        cfg = tiny_config(alpha=0.0, lam=0.0)
        _, parts = loss_value(bundle, bank, cfg, rng.standard_normal((4, 6)), rng.standard_normal((3, 6)))
        assert parts.total == parts.cls

    def test_equal_experts_same_bag_no_consistency(self, rng):
        bundle, bank = tiny_model()
        for p, q in zip(bundle.expert_u.parameters(), bundle.expert_b.parameters()):
            p.data = q.data.copy()
        x = rng.standard_normal((4, 6))
        _, parts = loss_value(bundle, bank, tiny_config(), x, x)
        assert parts.con == 0.0

    def test_composition(self, rng):
        bundle, bank = tiny_model()
        cfg = tiny_config(alpha=0.3, lam=2.0)
        _, p = loss_value(bundle, bank, cfg, rng.standard_normal((4, 6)), rng.standard_normal((3, 6)))
        assert p.total == pytest.approx(p.cls + 0.3 * p.dis + 2.0 * p.con, rel=1e-12)

    def test_single_branch(self, rng):
        bundle, bank = tiny_model(ensemble="none", distillation=False)
        out = forward_pair(bundle, rng.standard_normal((4, 6)))
        loss, parts = total_loss(out, 1, None, bundle, bank, tiny_config(ensemble="none", distillation=False))
        assert parts.con == 0.0 and parts.dis == 0.0
        assert loss.item() == pytest.approx(ad.cross_entropy(out.z_u, 1).item())

    def test_finite_differences(self, rng):
        bundle, bank = tiny_model()
        cfg = tiny_config()
        xu, xb = rng.standard_normal((5, 6)), rng.standard_normal((3, 6))
        params = trainable_parameters(bundle, bank)
        ad.zero_grads(params.values())
        with Tape() as tape:
            loss, _ = loss_value(bundle, bank, cfg, xu, xb)
        tape.backward(loss)
        for name in ("aggregator.attn_v.weight", "expert_b.head.bias", "adaptor.projector.weight", "prompt"):
            p = params[name]
            num = numeric_grad(lambda: loss_value(bundle, bank, cfg, xu, xb)[1].total, p)
            assert rel_error(p.grad, num) < 1e-4, name

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_is_named(self, rng):
        bundle, bank = tiny_model()
        bundle.expert_u.head.bias.data[:] = np.inf
        with pytest.raises(NumericalError, match="L_cls"):
            loss_value(bundle, bank, tiny_config(), rng.standard_normal((3, 6)), rng.standard_normal((3, 6)))

    def test_distillation_needs_bank(self, rng):
        bundle, _ = tiny_model()
        with pytest.raises(SpecError):
            loss_value(bundle, None, tiny_config(), rng.standard_normal((3, 6)), rng.standard_normal((3, 6)))


class TestSchedule:
    cfg = TrainConfig(base_lr=2e-4, warmup_epochs=2)

    def test_warmup_values(self):
        assert lr_at(0, 100, self.cfg) == 0.0
        assert abs(lr_at(100, 100, self.cfg) - 1e-4) < 1e-12
        assert abs(lr_at(200, 100, self.cfg) - 2e-4) < 1e-12
        assert lr_at(10_000, 100, self.cfg) == 2e-4

    def test_monotone(self):
        values = [lr_at(s, 7, self.cfg) for s in range(30)]
        assert values == sorted(values)

    def test_no_warmup(self):
        assert lr_at(0, 10, self.cfg.replace(warmup_epochs=0)) == 2e-4


class TestAdam:
    def test_first_step_magnitude(self):
        p = Tensor(np.array([[1.0, -2.0, 3.0]]), requires_grad=True)
        adam_step(AdamState(), {"p": p}, 2e-4, grads={"p": np.array([[0.5, -3.0, 1e3]])})
        np.testing.assert_allclose(p.data, [[1.0 - 2e-4, -2.0 + 2e-4, 3.0 - 2e-4]], atol=1e-10)

    def test_zero_gradient_no_decay_unchanged(self):
        p = Tensor(np.ones((2, 2)), requires_grad=True)
        state = AdamState()
        for _ in range(3):
            adam_step(state, {"p": p}, 1e-3, grads={"p": np.zeros((2, 2))})
        np.testing.assert_array_equal(p.data, np.ones((2, 2)))

    def test_decoupled_decay(self):
        p = Tensor(np.full((1, 2), 2.0), requires_grad=True)
        adam_step(AdamState(), {"p": p}, 0.1, weight_decay=0.5, grads={"p": np.zeros((1, 2))})
        np.testing.assert_allclose(p.data, [[2.0 * (1 - 0.05)] * 2])

    def test_shape_mismatch(self):
        p = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(DimensionError):
            adam_step(AdamState(), {"p": p}, 1e-3, grads={"p": np.ones((1, 2))})

    def test_moments_match_reference(self, rng):
        p = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        ref = p.data.copy()
        m = v = np.zeros_like(ref)
        state = AdamState()
        for t in range(1, 6):
            g = rng.standard_normal((2, 3))
            adam_step(state, {"p": p}, 1e-2, grads={"p": g})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, ref, atol=1e-14)


class TestFit:
    def test_log_shape(self, rng):
        result = fit_bags(toy_bags(rng), TINY_NAMES, tiny_config(epochs=2, warmup_epochs=1))
        assert [r.epoch for r in result.log] == [1, 2]
        assert result.log.to_csv().splitlines()[0] == "epoch,L_cls,L_dis,L_con,L_total,lr"
        assert all(math.isfinite(r.l_total) and r.l_dis > 0 for r in result.log)
        assert result.log[-1].lr == 2e-4

    def test_deterministic(self, rng):
        bags = toy_bags(rng)
        a = fit_bags(bags, TINY_NAMES, tiny_config(), seed=3)
        b = fit_bags(bags, TINY_NAMES, tiny_config(), seed=3)
        assert a.log.to_csv() == b.log.to_csv()
        for (n, p), q in zip(a.trainable().items(), b.trainable().values()):
            assert p.data.tobytes() == q.data.tobytes(), n

    def test_seed_matters(self, rng):
        bags = toy_bags(rng)
        a = fit_bags(bags, TINY_NAMES, tiny_config(), seed=1)
        b = fit_bags(bags, TINY_NAMES, tiny_config(), seed=2)
        assert a.log.to_csv() != b.log.to_csv()

    def test_loss_decreases_on_easy_data(self):
        rng = np.random.default_rng(0)
        centers = rng.standard_normal((3, 6)) * 3
        from mdemil.bags import Bag

        bags = [Bag(str(i), i % 3, centers[i % 3] + 0.1 * rng.standard_normal((4, 6))) for i in range(30)]
        result = fit_bags(bags, TINY_NAMES, tiny_config(epochs=15, warmup_epochs=1, base_lr=1e-2))
        assert result.log[-1].l_cls < 0.5 * result.log[0].l_cls

    def test_accumulation_is_linear(self, rng):
        """k accumulated pairs with seed 1/k equal the mean of k separate gradients."""
        bundle, bank = tiny_model()
        cfg = tiny_config()
        params = trainable_parameters(bundle, bank)
        pairs = [(rng.standard_normal((4, 6)), rng.standard_normal((3, 6)), i % 3, (i + 1) % 3) for i in range(3)]
        singles = []
        for xu, xb, yu, yb in pairs:
            ad.zero_grads(params.values())
            with Tape() as tape:
                loss, _ = loss_value(bundle, bank, cfg, xu, xb, yu, yb)
            tape.backward(loss)
            singles.append({n: p.grad.copy() for n, p in params.items()})
        ad.zero_grads(params.values())
        for xu, xb, yu, yb in pairs:
            with Tape() as tape:
                loss, _ = loss_value(bundle, bank, cfg, xu, xb, yu, yb)
            tape.backward(loss, np.full((1, 1), 1 / 3))
        for n, p in params.items():
            mean = sum(s[n] for s in singles) / 3
            assert np.max(np.abs(p.grad - mean)) < 1e-12, n

    def test_accumulate_steps(self, rng):
        bags = toy_bags(rng, n_bags=7)
        result = fit_bags(bags, TINY_NAMES, tiny_config(accumulate=3, epochs=1, warmup_epochs=0))
        assert len(result.log) == 1

    def test_prompt_grad_zero_without_distillation(self, rng):
        bundle, bank = tiny_model(distillation=False)
        assert bank is None and bundle.adaptor is None
        _, bank_on = tiny_model()
        bank_on.prompt.zero_grad()
        with Tape() as tape:
            loss, _ = loss_value(bundle, None, tiny_config(distillation=False),
                                 rng.standard_normal((3, 6)), rng.standard_normal((3, 6)))
        tape.backward(loss)
        assert not np.any(bank_on.prompt.grad)

    def test_label_out_of_range(self, rng):
        bags = toy_bags(rng, num_classes=4)
        with pytest.raises(SpecError):
            fit_bags(bags, TINY_NAMES, tiny_config())

    def test_mixed_dims(self, rng):
        bags = toy_bags(rng) + toy_bags(rng, n_bags=1, in_dim=5)
        with pytest.raises(DimensionError):
            fit_bags(bags, TINY_NAMES, tiny_config())


def test_checkpoint_round_trip(tmp_path, rng):
    bags = toy_bags(rng)
    result = fit_bags(bags, TINY_NAMES, tiny_config(ensemble="separate"))
    save_fit(result, tmp_path / "ck.bin")
    back = load_fit(tmp_path / "ck.bin")
    assert back.config == result.config and back.class_names == list(TINY_NAMES)
    np.testing.assert_array_equal(back.bank.prompt.data, result.bank.prompt.data)
    for bag in bags:
        np.testing.assert_array_equal(predict(back.bundle, bag.embeddings)[0], predict(result.bundle, bag.embeddings)[0])
