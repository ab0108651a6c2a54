import json
import math

import numpy as np
import pytest

from synclip.checkpoint import load_checkpoint
from synclip.exceptions import ConfigMismatch, ContractViolation
from synclip.expert import init_expert, toy_expert_config
from synclip.gan import (LipSyncer, TrainConfig, disc_forward, disc_loss, gen_adv_loss, gen_nonsaturating_loss,
                         init_quality_disc, is_finite_history, toy_disc_config, total_generator_loss,
                         train_wav2lip)
from synclip.generator import toy_generator_config

DELTA = 1e-7


def test_gen_adv_examples():
    assert gen_adv_loss([0.5, 0.5]) == pytest.approx(math.log(0.5), abs=1e-12)
    assert gen_adv_loss([0.0]) == pytest.approx(math.log(1 - DELTA), abs=1e-12)
    assert gen_adv_loss([1.0]) == pytest.approx(math.log(DELTA), abs=1e-9)
    assert gen_adv_loss([0.2, 0.6]) == pytest.approx((math.log(0.8) + math.log(0.4)) / 2, abs=1e-12)


def test_nonsaturating_term():
    assert gen_nonsaturating_loss([0.5]) == pytest.approx(math.log(2), abs=1e-12)
    assert gen_nonsaturating_loss([math.exp(-2)]) == pytest.approx(2.0, abs=1e-12)


def test_disc_loss_examples():
    assert disc_loss([0.5], [0.5]) == pytest.approx(2 * math.log(0.5), abs=1e-12)
    perfect = disc_loss([1 - DELTA], [DELTA])
    assert perfect == pytest.approx(0.0, abs=1e-6)
    assert disc_loss([0.5], [0.5]) < perfect
    assert disc_loss([0.9, 0.7], [0.1, 0.4]) == pytest.approx(
        (math.log(0.9) + math.log(0.7)) / 2 + (math.log(0.9) + math.log(0.6)) / 2, abs=1e-12)


def test_total_loss_examples():
    cfg = TrainConfig(s_w=0.03, s_g=0.07)
    assert total_generator_loss(1, 1, 1, cfg) == pytest.approx(1.0, abs=1e-12)
    zero = TrainConfig(s_w=0.0, s_g=0.0)
    assert total_generator_loss(0.37, 5.0, 9.0, zero) == 0.37
    assert total_generator_loss(0.4, 2.0, 0.6, cfg) * 2 == pytest.approx(total_generator_loss(0.8, 4.0, 1.2, cfg))
    with pytest.raises(ConfigMismatch):
        TrainConfig(s_w=0.5, s_g=0.5)
    with pytest.raises(ConfigMismatch):
        TrainConfig(s_w=-0.1)


def test_disc_outputs(rng):
    d = init_quality_disc(toy_disc_config(), seed=0)
    x = rng.random((6, 32, 32, 3))
    p = disc_forward(d, x)
    assert p.shape == (6,) and np.all((p > 0) & (p < 1))
    perm = rng.permutation(6)
    np.testing.assert_allclose(disc_forward(d, x[perm]), p[perm], atol=1e-6)
    z = init_quality_disc(toy_disc_config(), seed=0, zero_head=True)
    np.testing.assert_allclose(disc_forward(z, x), 0.5, atol=1e-7)


@pytest.fixture(scope="module")
def short_run(toy_corpus, toy_cfg, tmp_path_factory):
    expert = init_expert(toy_expert_config(5), toy_cfg, seed=0).freeze()
    run_dir = tmp_path_factory.mktemp("run")
    cfg = TrainConfig(batch=2, steps=4, seed=1, check_every=2)
    g, d, hist = train_wav2lip(*toy_corpus, expert, toy_generator_config(toy_cfg), toy_disc_config(), cfg,
                               toy_cfg, run_dir=run_dir, checkpoint_every=2)
    return expert, g, d, hist, run_dir, cfg


def test_history_records(short_run):
    _, _, _, hist, _, cfg = short_run
    assert [r["step"] for r in hist] == [1, 2, 3, 4]
    for r in hist:
        expect = (1 - cfg.s_w - cfg.s_g) * r["l_recon"] + cfg.s_w * r["e_sync"] + cfg.s_g * r["l_gen"]
        assert abs(r["l_total"] - expect) < 1e-9
        assert r["l_disc"] is not None and r["l_disc"] <= 0
    assert is_finite_history(hist)


def test_run_dir_contents(short_run):
    _, g, _, hist, run_dir, _ = short_run
    lines = (run_dir / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["step"] for x in lines] == [1, 2, 3, 4]
    assert json.loads((run_dir / "config.json").read_text())["train"]["s_w"] == 0.03
    for name in ("generator_2.ckpt", "generator_4.ckpt", "generator_final.ckpt", "disc_final.ckpt"):
        assert (run_dir / name).exists()
    final, _ = load_checkpoint(run_dir / "generator_final.ckpt", expect_kind="generator")
    assert all(np.array_equal(final[k], g[k]) for k in g.names())


def test_training_deterministic(short_run, toy_corpus, toy_cfg):
    expert, g, _, hist, _, cfg = short_run
    g2, _, hist2 = train_wav2lip(*toy_corpus, expert, toy_generator_config(toy_cfg), toy_disc_config(), cfg, toy_cfg)
    assert g2.checksum() == g.checksum()
    assert [r["l_total"] for r in hist2] == [r["l_total"] for r in hist]


def test_unfrozen_expert_rejected(toy_corpus, toy_cfg):
    e = init_expert(toy_expert_config(5), toy_cfg)
    with pytest.raises(ContractViolation):
        train_wav2lip(*toy_corpus, e, toy_generator_config(toy_cfg), toy_disc_config(), TrainConfig(steps=1), toy_cfg)


def test_no_discriminator_when_s_g_zero(toy_corpus, toy_cfg):
    e = init_expert(toy_expert_config(5), toy_cfg).freeze()
    d0 = init_quality_disc(toy_disc_config(), seed=[0, 13])
    _, d, hist = train_wav2lip(*toy_corpus, e, toy_generator_config(toy_cfg), toy_disc_config(),
                               TrainConfig(s_g=0.0, batch=1, steps=2), toy_cfg)
    assert all(r["l_disc"] is None and r["l_gen"] == 0.0 for r in hist)
    assert d.checksum() == d0.checksum()


def test_lipsyncer_estimator(toy_corpus, toy_cfg):
    e = init_expert(toy_expert_config(5), toy_cfg).freeze()
    est = LipSyncer(generator_config=toy_generator_config(toy_cfg), disc_config=toy_disc_config(),
                    batch_size=1, n_steps=1)
    assert est.get_params()["s_w"] == 0.03
    est.fit(*toy_corpus, e)
    tracks, mels = toy_corpus
    out = est.transform((tracks[0], mels[0]))
    assert out.shape == tracks[0].frames.shape
