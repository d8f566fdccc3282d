"""Model tests: variant wiring, missing-modality handling, modality
dropout, and checkpoint round trips."""

import numpy as np
import pytest

import emifusion.data as data_mod
from emifusion.model import (
    CheckpointError,
    FusionModel,
    ModalityBundle,
    ModelConfig,
    load_checkpoint,
    modality_dropout,
    save_checkpoint,
)
from emifusion.metrics import mse_loss
from emifusion.tensor import Tensor


def small_config(**overrides) -> ModelConfig:
    base = dict(d_audio_in=11, d_vision_in=10, d_text_in=9, d_latent=16,
                head_count=2, mlp_hidden=12, max_audio_len=24,
                max_vision_len=24)
    base.update(overrides)
    return ModelConfig(**base)


def make_records(rng, n, d_audio=11, d_vision=10, d_text=9, plan=None):
    records = []
    for i in range(n):
        drop = plan[i] if plan else {}
        records.append(data_mod.FeatureRecord(
            id=f"r{i}",
            target=rng.uniform(0, 1, 6),
            audio=(None if drop.get("audio")
                   else rng.standard_normal((int(rng.integers(2, 6)),
                                             d_audio))),
            vision=(None if drop.get("vision")
                    else rng.standard_normal((int(rng.integers(2, 5)),
                                              d_vision))),
            text=None if drop.get("text") else rng.standard_normal(d_text),
        ))
    return records


def batch_of(records, cfg):
    return data_mod.collate(
        records, d_audio=cfg.d_audio_in, d_vision=cfg.d_vision_in,
        d_text=cfg.d_text_in, n_targets=cfg.n_targets,
        max_audio_len=cfg.max_audio_len, max_vision_len=cfg.max_vision_len)


class TestConfig:
    def test_reference_fused_dims(self):
        assert ModelConfig().fused_dim == 1792
        assert ModelConfig(anchor="audio").fused_dim == 2051
        assert ModelConfig(anchor="vision").fused_dim == 1792
        assert ModelConfig(fusion="simple_concat").fused_dim == 1536
        assert ModelConfig(fusion="self_attention_only").fused_dim == 1536

    def test_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(anchor="smell").validate()
        with pytest.raises(ValueError):
            ModelConfig(fusion="late").validate()
        with pytest.raises(ValueError):
            ModelConfig(d_latent=10, head_count=4).validate()
        with pytest.raises(ValueError):
            ModelConfig(modality_dropout_p=1.0).validate()

    def test_dict_round_trip_strict(self):
        cfg = small_config(anchor="audio")
        again = ModelConfig.from_dict(cfg.to_dict())
        assert again == cfg
        with pytest.raises(ValueError):
            ModelConfig.from_dict({"bogus_knob": 1})


class TestParameters:
    def test_names_unique_and_no_decay_split(self):
        model = FusionModel(small_config(), rng=0)
        names = [n for n, _ in model.named_parameters()]
        assert len(names) == len(set(names))
        exempt = model.no_decay_names()
        assert "audio_attn.ln_gain" in exempt
        assert "head.w1.bias" in exempt
        assert "head.w1.weight" not in exempt
        assert "token_audio" not in exempt

    def test_same_seed_same_params(self):
        a = FusionModel(small_config(), rng=3)
        b = FusionModel(small_config(), rng=3)
        for (na, pa), (nb, pb) in zip(a.named_parameters(),
                                      b.named_parameters()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data)

    def test_shared_layers_bit_equal_across_variants(self):
        variants = [small_config(),
                    small_config(fusion="simple_concat"),
                    small_config(fusion="self_attention_only"),
                    small_config(anchor="audio"),
                    small_config(anchor="vision")]
        models = [FusionModel(c, rng=11) for c in variants]
        ref = dict(models[0].named_parameters())
        for m in models[1:]:
            for name, p in m.named_parameters():
                if name.split(".")[0] in ("audio_proj", "vision_proj",
                                          "text_proj") or \
                        name.startswith("token_"):
                    assert np.array_equal(p.data, ref[name].data), name

    def test_projected_features_bit_equal_across_variants(self):
        rng = np.random.default_rng(5)
        records = make_records(rng, 3)
        outs = []
        for cfg in (small_config(), small_config(fusion="simple_concat"),
                    small_config(anchor="audio")):
            model = FusionModel(cfg, rng=11)
            batch = batch_of(records, cfg)
            _, inter = model.forward_batch(batch, return_intermediates=True)
            outs.append(inter)
        for key in ("audio_projected", "vision_projected", "text_projected"):
            assert np.array_equal(outs[0][key], outs[1][key]), key
            assert np.array_equal(outs[0][key], outs[2][key]), key


class TestForwardVariants:
    @pytest.mark.parametrize("cfg", [
        small_config(),
        small_config(fusion="simple_concat"),
        small_config(fusion="self_attention_only"),
        small_config(anchor="audio"),
        small_config(anchor="vision"),
        small_config(share_query_projection=True),
        small_config(use_positional_encoding=True),
    ], ids=["full", "concat", "self_only", "audio_anchor", "vision_anchor",
            "shared_q", "pos_enc"])
    def test_forward_backward_shapes(self, cfg):
        model = FusionModel(cfg, rng=1)
        rng = np.random.default_rng(2)
        plan = [{}, {"audio": True}, {"vision": True}, {"text": True}]
        records = make_records(rng, 4, plan=plan)
        batch = batch_of(records, cfg)
        out, inter = model.forward_batch(batch, return_intermediates=True)
        assert out.shape == (4, cfg.n_targets)
        assert inter["fused"].shape == (4, cfg.fused_dim)
        loss = mse_loss(out, Tensor(batch.target))
        loss.backward()
        for name, p in model.named_parameters():
            assert p.grad is not None, name
            assert np.all(np.isfinite(p.grad)), name

    def test_positional_encoding_changes_output(self):
        rng = np.random.default_rng(3)
        records = make_records(rng, 2)
        plain = FusionModel(small_config(), rng=4)
        encoded = FusionModel(small_config(use_positional_encoding=True),
                              rng=4)
        batch = batch_of(records, plain.config)
        a = plain.forward_batch(batch).data
        b = encoded.forward_batch(batch).data
        assert not np.array_equal(a, b)

    def test_batch_width_check(self):
        model = FusionModel(small_config(), rng=0)
        cfg_wrong = small_config(d_audio_in=12)
        rng = np.random.default_rng(0)
        records = make_records(rng, 2, d_audio=12)
        batch = batch_of(records, cfg_wrong)
        with pytest.raises(ValueError):
            model.forward_batch(batch)


class TestMissingModalities:
    def test_token_substitution_equivalence(self):
        # A missing modality must behave exactly like feeding its learned
        # token as the sole frame of that modality.
        cfg = small_config(head_dropout_p=0.0)
        model = FusionModel(cfg, rng=6)
        rng = np.random.default_rng(7)
        base = make_records(rng, 1)[0]
        for name in ("audio", "vision", "text"):
            token = model.tokens[name].data
            missing = ModalityBundle.from_record(base)
            setattr(missing, name, None)
            missing.missing = dict(missing.missing)
            missing.missing[name] = True
            explicit = ModalityBundle.from_record(base)
            if name == "text":
                explicit.text = token.copy()
            else:
                setattr(explicit, name, token[None, :].copy())
            out_missing = model.forward(missing).data
            out_explicit = model.forward(explicit).data
            np.testing.assert_allclose(out_missing, out_explicit,
                                       atol=1e-12, err_msg=name)

    def test_zero_substitution_without_tokens(self):
        cfg = small_config(use_missing_tokens=False, head_dropout_p=0.0)
        model = FusionModel(cfg, rng=6)
        assert model.tokens == {}
        rng = np.random.default_rng(8)
        base = make_records(rng, 1)[0]
        missing = ModalityBundle.from_record(base)
        missing.audio = None
        missing.missing = dict(missing.missing, audio=True)
        explicit = ModalityBundle.from_record(base)
        explicit.audio = np.zeros((1, cfg.d_audio_in))
        np.testing.assert_allclose(
            model.forward(missing).data, model.forward(explicit).data,
            atol=1e-12)

    def test_all_modalities_missing(self):
        cfg = small_config()
        model = FusionModel(cfg, rng=9)
        bundle = ModalityBundle(target=np.full(6, 0.5))
        assert all(bundle.missing.values())
        out = model.forward(bundle)
        assert out.shape == (6,)
        assert np.all(np.isfinite(out.data))
        loss = mse_loss(out.reshape(1, 6), Tensor(np.full((1, 6), 0.5)))
        loss.backward()
        for name in ("audio", "vision", "text"):
            grad = model.tokens[name].grad
            assert grad is not None and np.any(grad != 0.0), name

    def test_raw_features_of_missing_modality_are_inert(self):
        cfg = small_config(head_dropout_p=0.0)
        model = FusionModel(cfg, rng=10)
        rng = np.random.default_rng(11)
        plan = [{}, {"vision": True}]
        records = make_records(rng, 2, plan=plan)
        batch = batch_of(records, cfg)
        out = model.forward_batch(batch)
        loss = mse_loss(out, Tensor(batch.target))
        model.zero_grad()
        loss.backward()
        grads = {n: (None if p.grad is None else p.grad.copy())
                 for n, p in model.named_parameters()}

        poisoned = batch_of(records, cfg)
        poisoned.vision[1] = 1e6
        out_p = model.forward_batch(poisoned)
        loss_p = mse_loss(out_p, Tensor(poisoned.target))
        model.zero_grad()
        loss_p.backward()
        assert np.array_equal(out.data, out_p.data)
        for n, p in model.named_parameters():
            if grads[n] is None:
                assert p.grad is None, n
            else:
                assert np.array_equal(grads[n], p.grad), n

    def test_token_gets_no_gradient_when_all_present(self):
        cfg = small_config()
        model = FusionModel(cfg, rng=12)
        rng = np.random.default_rng(13)
        records = make_records(rng, 2)
        batch = batch_of(records, cfg)
        model.zero_grad()
        mse_loss(model.forward_batch(batch), Tensor(batch.target)).backward()
        for name in ("audio", "vision", "text"):
            assert model.tokens[name].grad is None


class TestModalityDropout:
    def make_bundle(self, rng):
        return ModalityBundle(audio=rng.standard_normal((3, 4)),
                              vision=rng.standard_normal((2, 5)),
                              text=rng.standard_normal(6))

    def test_eval_mode_is_an_error(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            modality_dropout(self.make_bundle(rng), 0.1, rng, train=False)

    def test_p_zero_unchanged_no_rng(self):
        rng = np.random.default_rng(1)
        bundle = self.make_bundle(rng)
        state = rng.bit_generator.state["state"]["state"]
        out = modality_dropout(bundle, 0.0, rng)
        assert out is not bundle
        assert rng.bit_generator.state["state"]["state"] == state
        assert out.audio is bundle.audio and out.missing == bundle.missing

    def test_input_untouched_and_already_missing_stays(self):
        rng = np.random.default_rng(2)
        bundle = self.make_bundle(rng)
        bundle.text = None
        bundle.missing = dict(bundle.missing, text=True)
        for _ in range(50):
            out = modality_dropout(bundle, 0.7, rng)
            assert out.missing["text"] is True
            assert bundle.audio is not None  # input untouched
            for name in ("audio", "vision"):
                assert out.missing[name] == (getattr(out, name) is None)

    def test_empirical_rate(self):
        rng = np.random.default_rng(3)
        bundle = self.make_bundle(rng)
        trials = 2000
        counts = {"audio": 0, "vision": 0, "text": 0}
        for _ in range(trials):
            out = modality_dropout(bundle, 0.1, rng)
            for name in counts:
                counts[name] += out.missing[name]
        for name, count in counts.items():
            assert abs(count / trials - 0.1) < 0.02, name

    def test_probability_validation(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ValueError):
            modality_dropout(self.make_bundle(rng), 1.0, rng)


class TestBundleValidation:
    def test_shape_and_flag_errors(self):
        cfg = small_config()
        good = ModalityBundle(audio=np.zeros((2, 11)),
                              vision=np.zeros((2, 10)), text=np.zeros(9))
        good.validate(cfg)
        bad = ModalityBundle(audio=np.zeros((2, 12)))
        with pytest.raises(ValueError):
            bad.validate(cfg)
        contradicting = ModalityBundle(text=np.zeros(9))
        contradicting.missing["text"] = True
        with pytest.raises(ValueError):
            contradicting.validate(cfg)
        nonfinite = ModalityBundle(text=np.full(9, np.nan))
        with pytest.raises(ValueError):
            nonfinite.validate(cfg)


class TestCheckpoints:
    def test_weights_only_round_trip(self, tmp_path):
        cfg = small_config(anchor="vision")
        model = FusionModel(cfg, rng=20)
        path = tmp_path / "weights.ckpt"
        save_checkpoint(model, None, path)
        loaded, state = load_checkpoint(path)
        assert state is None
        assert loaded.config == cfg
        for (na, pa), (nb, pb) in zip(model.named_parameters(),
                                      loaded.named_parameters()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data)

    def test_loaded_model_predicts_identically(self, tmp_path):
        cfg = small_config(head_dropout_p=0.0)
        model = FusionModel(cfg, rng=21)
        rng = np.random.default_rng(22)
        records = make_records(rng, 3)
        batch = batch_of(records, cfg)
        expected = model.forward_batch(batch).data
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, None, path)
        loaded, _ = load_checkpoint(path)
        assert np.array_equal(loaded.forward_batch(batch).data, expected)

    def test_truncated_file_rejected(self, tmp_path):
        model = FusionModel(small_config(), rng=23)
        path = tmp_path / "t.ckpt"
        save_checkpoint(model, None, path)
        raw = path.read_bytes()
        for cut in (10, len(raw) // 2, len(raw) - 3):
            clipped = tmp_path / f"cut{cut}.ckpt"
            clipped.write_bytes(raw[:cut])
            with pytest.raises(CheckpointError):
                load_checkpoint(clipped)

    def test_corrupted_byte_rejected(self, tmp_path):
        model = FusionModel(small_config(), rng=24)
        path = tmp_path / "c.ckpt"
        save_checkpoint(model, None, path)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_file_is_checkpoint_error(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.ckpt")
