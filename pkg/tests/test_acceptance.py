"""Acceptance checks, one test per criterion. Each prints a PASS/FAIL line in the run summary.

The learning criteria (6, 7, 8) train toy models on one CPU and take minutes.
"""
import contextlib
import hashlib
import math

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from test_gradients import directional_check

from synclip import losses
from synclip.checkpoint import save_checkpoint
from synclip.corpus import build_generator_batch, lower_half, stack_window_channels, synth_toy_corpus, toy_window_config
from synclip.evaluation import (AblationBudget, build_benchmark, evaluate_benchmark, format_benchmark, lse_metrics,
                                mean_lse, offset_clip, run_ablation, toy_durations)
from synclip.expert import (expert_bce_loss, expert_module, init_expert, make_eval_pairs, sync_probability,
                            toy_expert_config, train_expert)
from synclip.gan import (TrainConfig, disc_loss, disc_module, gen_adv_loss, init_quality_disc, toy_disc_config,
                         total_generator_loss, train_wav2lip)
from synclip.generator import (fold_for_expert, generator_module, init_generator, reconstruction_loss,
                               toy_generator_config, unfold_from_expert)
from synclip.inference import InferenceJob, lipsync_video
from synclip.media import read_clip, write_frames_container, write_wav

DELTA = 1e-7
SEEDS = (0, 1, 2)


@contextlib.contextmanager
def criterion(n, name):
    info = {}
    try:
        yield info
    except BaseException as exc:
        ACCEPTANCE_LINES[n] = f"[{n:2d}] FAIL {name}: {info.get('detail', '')} ({type(exc).__name__}: {exc})".rstrip()
        raise
    ACCEPTANCE_LINES[n] = f"[{n:2d}] PASS {name}: {info.get('detail', '')}".rstrip()


@pytest.fixture(scope="module")
def window():
    return toy_window_config()


@pytest.fixture(scope="module")
def train_corpus(window):
    return synth_toy_corpus(window, 40, 0)


@pytest.fixture(scope="module")
def eval_corpus(window):
    return synth_toy_corpus(window, 12, 99, n_frames=(60, 100))


@pytest.fixture(scope="module")
def scorer(window):
    # trained on its own corpus so it never shares data or init with a training-loss expert
    tracks, mels = synth_toy_corpus(window, 40, 1)
    held = synth_toy_corpus(window, 8, 2024, n_frames=60)
    params, _ = train_expert(tracks, mels, window, toy_expert_config(5), steps=5000, seed=2,
                             eval_pairs=make_eval_pairs(*held, window, 5, 400), eval_every=250, target_acc=0.93)
    return params.freeze()


@pytest.fixture(scope="module")
def learnability(window, train_corpus, eval_corpus):
    """Per seed: (reached accuracy, steps used, frozen Tv=5 expert)."""
    ev = make_eval_pairs(*eval_corpus, window, 77, 400)
    out = {}
    for seed in SEEDS:
        params, hist = train_expert(*train_corpus, window, toy_expert_config(5), steps=5000, seed=[seed, 5],
                                    eval_pairs=ev, eval_every=250, target_acc=0.90)
        accs = [r["eval_acc"] for r in hist if "eval_acc" in r]
        out[seed] = (max(accs), len(hist), params.freeze())
    return out


# --------------------------------------------------------------------------- 1

def test_c01_formula_oracles():
    with criterion(1, "formula oracles") as info:
        checks = 0
        probs = [([1, 0], [1, 0], 1.0), ([1, 0], [0, 1], 0.0), ([1, 1], [1, 0], 1 / math.sqrt(2)),
                 ([3, 4], [4, 3], 24 / 25), ([0, 0], [1, 1], 0.0), ([2, 0, 1], [1, 1, 0], 2 / (math.sqrt(5) * math.sqrt(2)))]
        for v, s, want in probs:
            assert abs(sync_probability(v, s) - want) < 1e-6
            checks += 1
        bce = [(0.5, 1, math.log(2)), (0.5, 0, math.log(2)), (0.9, 1, -math.log(0.9)), (0.9, 0, -math.log(0.1)),
               (0.0, 1, -math.log(DELTA)), (1.0, 0, -math.log(DELTA))]
        for p, y, want in bce:
            assert abs(expert_bce_loss(p, y) - want) < 1e-6
            checks += 1
        recon = [(np.zeros((2, 3)), np.zeros((2, 3)), 0.0), (np.ones((2, 2)), np.zeros((2, 2)), 1.0),
                 ([0.2, 0.4], [0.4, 0.1], 0.25), ([[1.0, -1.0]], [[0.0, 0.0]], 1.0),
                 (np.full((4, 8, 8, 3), 0.75), np.full((4, 8, 8, 3), 0.5), 0.25)]
        for a, b, want in recon:
            assert abs(reconstruction_loss(a, b) - want) < 1e-6
            checks += 1
        adv = [([0.5], math.log(0.5)), ([0.0], math.log(1 - DELTA)), ([1.0], math.log(DELTA)),
               ([0.2, 0.6], (math.log(0.8) + math.log(0.4)) / 2), ([0.1, 0.1, 0.1], math.log(0.9))]
        for d, want in adv:
            assert abs(gen_adv_loss(d) - want) < 1e-6
            checks += 1
        disc = [([0.5], [0.5], 2 * math.log(0.5)), ([1.0], [0.0], 2 * math.log(1 - DELTA)),
                ([0.9, 0.7], [0.1, 0.4], (math.log(0.9) + math.log(0.7)) / 2 + (math.log(0.9) + math.log(0.6)) / 2),
                ([0.8], [0.3], math.log(0.8) + math.log(0.7)), ([0.0], [1.0], 2 * math.log(DELTA))]
        for r, f, want in disc:
            assert abs(disc_loss(r, f) - want) < 1e-6
            checks += 1
        cfg = TrainConfig(s_w=0.03, s_g=0.07)
        total = [((1, 1, 1), 1.0), ((0, 0, 0), 0.0), ((0.5, 2.0, 0.7), 0.9 * 0.5 + 0.03 * 2.0 + 0.07 * 0.7),
                 ((0.1, 12.0, 3.0), 0.09 + 0.36 + 0.21), ((0.02, 0.45, math.log(2)), 0.018 + 0.0135 + 0.07 * math.log(2))]
        for args, want in total:
            assert abs(total_generator_loss(*args, cfg) - want) < 1e-6
            checks += 1
        info["detail"] = f"{checks} hand-computed cases within 1e-6"


# --------------------------------------------------------------------------- 2

def test_c02_weight_identity(window, toy_corpus, toy_cfg):
    with criterion(2, "l_total weight identity") as info:
        expert = init_expert(toy_expert_config(5), toy_cfg, seed=0).freeze()
        cfg = TrainConfig(s_w=0.03, s_g=0.07, batch=2, steps=12, seed=3)
        _, _, hist = train_wav2lip(*toy_corpus, expert, toy_generator_config(toy_cfg), toy_disc_config(), cfg, toy_cfg)
        worst = max(abs(r["l_total"] - (0.9 * r["l_recon"] + 0.03 * r["e_sync"] + 0.07 * r["l_gen"])) for r in hist)
        info["detail"] = f"{len(hist)} steps, max |diff| {worst:.2e}"
        assert len(hist) == 12 and worst < 1e-9


# --------------------------------------------------------------------------- 3

def test_c03_gradient_checks(toy_corpus, toy_cfg):
    with criterion(3, "gradient checks") as info:
        errs_a = []
        for seed in range(5):
            rng = np.random.default_rng(seed)
            v = torch.tensor(rng.random((6, 16)), requires_grad=True)
            s = torch.tensor(rng.random((6, 16)), requires_grad=True)
            y = torch.tensor(rng.integers(0, 2, 6), dtype=torch.float64)
            errs_a.append(directional_check(
                lambda: losses.binary_cross_entropy(losses.cosine_sync_probability(torch.relu(v), torch.relu(s), 1e-8),
                                                    y).mean(), [v, s], seed))
        e = expert_module(init_expert(toy_expert_config(5), toy_cfg, seed=3).freeze(), dtype=torch.float64)
        d = disc_module(init_quality_disc(toy_disc_config(), seed=4), dtype=torch.float64)
        g = generator_module(init_generator(toy_generator_config(toy_cfg), toy_cfg, seed=5), dtype=torch.float64)
        e.requires_grad_(False)
        d.requires_grad_(False)
        b = build_generator_batch(*toy_corpus, toy_cfg, 9, 2)
        t = {k: torch.tensor(np.asarray(getattr(b, k)), dtype=torch.float64)
             for k in ("reference", "pose_prior", "audio", "target", "expert_audio")}

        def total():
            fake = g(t["reference"], t["pose_prior"], t["audio"])
            p = losses.cosine_sync_probability(e.encode_face(fold_for_expert(fake, 5)), e.encode_audio(t["expert_audio"]),
                                               1e-8)
            return losses.weighted_total(losses.l1_reconstruction(fake, t["target"]), losses.expert_sync(p),
                                         losses.nonsaturating_generator_term(d(fake)), 0.03, 0.07)

        errs_b = [directional_check(total, list(g.parameters()), seed) for seed in range(3)]
        info["detail"] = f"P+BCE max rel err {max(errs_a):.1e} (<1e-4), generator max rel err {max(errs_b):.1e} (<1e-3)"
        assert max(errs_a) < 1e-4 and max(errs_b) < 1e-3


# --------------------------------------------------------------------------- 4

def test_c04_shape_contracts(window, toy_corpus):
    with criterion(4, "shape contracts") as info:
        rng = np.random.default_rng(0)
        cases = 0
        for Tv in (1, 3, 5):
            w = window.with_window(Tv)
            g_cfg = toy_generator_config(w)
            g_net = generator_module(init_generator(g_cfg, w, seed=0))
            for N in (1, 2, 4):
                b = build_generator_batch(*toy_corpus, w, [N, Tv], N)
                assert b.reference.shape == b.pose_prior.shape == b.target.shape == (N * Tv, w.H, w.W, 3)
                assert b.audio.shape == (N * Tv, w.Ta, w.D)
                with torch.no_grad():
                    out = g_net(torch.from_numpy(b.reference), torch.from_numpy(b.pose_prior),
                                torch.from_numpy(b.audio))
                assert tuple(out.shape) == (N * Tv, w.H, w.W, 3)
                frames = rng.random((N * Tv, w.H, w.W, 3)).astype(np.float32)
                folded = fold_for_expert(frames, Tv)
                assert folded.shape == (N, w.H // 2, w.W, 3 * Tv)
                assert np.array_equal(unfold_from_expert(folded, Tv), lower_half(frames))
                for i in range(N):
                    assert np.array_equal(folded[i], stack_window_channels(lower_half(frames[i * Tv:(i + 1) * Tv])))
                t_folded = fold_for_expert(torch.from_numpy(frames), Tv)
                assert torch.equal(unfold_from_expert(t_folded, Tv), torch.from_numpy(lower_half(frames)))
                cases += 1
        info["detail"] = f"{cases} (N, Tv) combinations, fold/unfold bit-exact"


# --------------------------------------------------------------------------- 5

def test_c05_frozen_expert(window, toy_corpus):
    with criterion(5, "frozen expert checksum") as info:
        expert = init_expert(toy_expert_config(5), window, seed=7).freeze()
        before = expert.checksum()
        train_wav2lip(*toy_corpus, expert, toy_generator_config(window), toy_disc_config(),
                      TrainConfig(batch=2, steps=20, seed=0, check_every=5), window)
        after = expert.checksum()
        info["detail"] = f"sha256 {before[:12]} before and after a 20-step run"
        assert before == after


# --------------------------------------------------------------------------- 6

@pytest.mark.slow
def test_c06_expert_learnability(learnability):
    with criterion(6, "expert learnability (Tv=5)") as info:
        passed = [s for s, (acc, steps, _) in learnability.items() if acc >= 0.90]
        info["detail"] = ", ".join(f"seed {s}: {acc:.3f} in {steps} steps" for s, (acc, steps, _) in learnability.items())
        assert len(passed) >= 2


# --------------------------------------------------------------------------- 7

ABLATION = AblationBudget(expert_steps=2000, expert_schedule="cosine", gen_steps=300)


@pytest.fixture(scope="module")
def ablation(window, train_corpus, eval_corpus, scorer):
    return {seed: run_ablation(train_corpus, window, ABLATION, seed, eval_corpus=eval_corpus, scorer=scorer)
            for seed in SEEDS}


@pytest.mark.slow
def test_c07_window_and_finetune_trends(ablation):
    with criterion(7, "temporal window / fine-tune trends") as info:
        acc = {(r.Tv, r.fine_tuned): [] for r in ablation[0]}
        for rows in ablation.values():
            for r in rows:
                acc[(r.Tv, r.fine_tuned)].append(r.off_sync_acc)
        mean = {k: float(np.mean(v)) for k, v in acc.items()}
        info["detail"] = "frozen " + " / ".join(f"Tv{t} {mean[(t, False)]:.3f}" for t in (5, 3, 1)) + \
                         "; fine-tuned " + " / ".join(f"Tv{t} {mean[(t, True)]:.3f}" for t in (5, 3, 1))
        assert mean[(5, False)] >= mean[(3, False)] >= mean[(1, False)]
        assert all(mean[(t, False)] >= mean[(t, True)] for t in (1, 3, 5))


# --------------------------------------------------------------------------- 8

@pytest.mark.slow
def test_c08_sync_loss_efficacy(window, train_corpus, eval_corpus, learnability, scorer):
    with criterion(8, "sync loss lowers LSE-D") as info:
        pairs = build_benchmark(toy_durations(eval_corpus[0]), 5, 24)
        scores = {0.0: [], 0.03: []}
        for seed in SEEDS:
            expert = learnability[seed][2]
            warm, _, _ = train_wav2lip(*train_corpus, expert, toy_generator_config(window), toy_disc_config(),
                                       TrainConfig(s_w=0.0, s_g=0.0, batch=4, steps=3000, lr=1e-3, seed=seed), window)
            for s_w in scores:
                cfg = TrainConfig(s_w=s_w, s_g=0.07, batch=4, steps=800, lr=1e-3, grad_clip=0.1, seed=seed + 100)
                gen, _, _ = train_wav2lip(*train_corpus, expert, toy_generator_config(window), toy_disc_config(), cfg,
                                          window, gen_init=warm)
                scores[s_w].append(mean_lse(evaluate_benchmark(gen, scorer, pairs, *eval_corpus, max_offset=10))[0])
        off, on = np.mean(scores[0.0]), np.mean(scores[0.03])
        info["detail"] = f"mean LSE-D s_w=0: {off:.4f}, s_w=0.03: {on:.4f} (per seed {np.round(scores[0.0], 3).tolist()} " \
                         f"vs {np.round(scores[0.03], 3).tolist()})"
        assert on < off


# --------------------------------------------------------------------------- 9

def test_c09_lse_offset_sanity(window, scorer):
    with criterion(9, "LSE argmin tracks audio shift") as info:
        _, mels, clips = synth_toy_corpus(window, 12, 4242, n_frames=120, return_clips=True)
        in_sync = hits = total = 0
        for c, mel in zip(clips, mels):
            in_sync += lse_metrics(c.track, mel, scorer, max_offset=15).best_offset == 0
            for k in range(-10, 11):
                frames, mel = offset_clip(c.track.frames, c.waveform, k, window)
                hits += lse_metrics(frames, mel, scorer, max_offset=15).best_offset == -k
                total += 1
        info["detail"] = f"in-sync argmin 0 in {in_sync}/{len(clips)}, shifted argmin -k in {hits}/{total}"
        assert in_sync / len(clips) >= 0.9 and hits / total >= 0.9


# --------------------------------------------------------------------------- 10

def test_c10_benchmark_determinism(tmp_path):
    with criterion(10, "benchmark determinism") as info:
        entries = [(f"clip{i:03d}", d) for i, d in enumerate(np.random.default_rng(3).uniform(1.0, 12.0, 60))]
        a = format_benchmark(build_benchmark(entries, 1234, 200))
        b = format_benchmark(build_benchmark(list(reversed(entries)), 1234, 200))
        pairs = build_benchmark(entries, 1234, 200)
        ok = sum(p.audio_len < p.video_len for p in pairs)
        info["detail"] = f"{len(pairs)} pairs, byte-identical: {a == b}, audio<video in {ok}/{len(pairs)}"
        assert a == b and ok == len(pairs)
        assert format_benchmark(build_benchmark(entries, 1235, 200)) != a


# --------------------------------------------------------------------------- 11

def test_c11_cli_end_to_end(window, tmp_path):
    with criterion(11, "lipsync end-to-end") as info:
        _, _, clips = synth_toy_corpus(window, 2, 31, n_frames=30, return_clips=True)
        face = (clips[0].track.frames * 255).round().astype(np.uint8)
        rng = np.random.default_rng(8)
        frames = rng.integers(0, 256, (30, 72, 96, 3), dtype=np.uint8)
        frames[:, 10:42, 20:52] = face
        write_frames_container(tmp_path / "src.clip", frames, window.fps)
        write_wav(tmp_path / "speech.wav", clips[0].waveform, window.sample_rate)
        save_checkpoint(init_generator(toy_generator_config(window), window, seed=1), None, tmp_path / "g.ckpt")
        job = InferenceJob(str(tmp_path / "src.clip"), str(tmp_path / "speech.wav"), str(tmp_path / "g.ckpt"),
                           str(tmp_path / "out.clip"), box=(20, 10, 32, 32))
        lipsync_video(job)
        out = read_clip(tmp_path / "out.clip")
        inside = np.zeros((72, 96), bool)
        inside[10:52, 20:52] = True  # box plus the default 10 px bottom pad
        untouched = np.array_equal(out["frames"][:, ~inside], frames[:, ~inside])
        audio_ok = hashlib.sha256(out["audio"]).digest() == hashlib.sha256((tmp_path / "speech.wav").read_bytes()).digest()
        info["detail"] = f"frames {len(out['frames'])}/{len(frames)}, fps {out['fps']}, outside-box identical " \
                         f"{untouched}, audio bit-exact {audio_ok}"
        assert len(out["frames"]) == len(frames) and out["fps"] == window.fps and untouched and audio_ok
