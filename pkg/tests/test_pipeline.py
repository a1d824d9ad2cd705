import dataclasses
import json
import threading

import numpy as np
import pytest
import torch

from lacoste.config import Config, EnsembleConfig, PatchSpec, SceneConfig, replace
from lacoste.errors import ConfigurationError, DataError
from lacoste.lacls import PatchClassifier
from lacoste.pipeline import (
    FinalPrediction,
    Lacoste,
    MemoryBank,
    TrainState,
    agnostic_step,
    dump_tracklets,
    ensemble,
    frame_step,
    infer_clip,
    infer_sequence,
    load_system,
    memory_get_or_compute,
    save_system,
    semantic_merge,
    tracklet_step,
    train,
    train_step,
)
from lacoste.stscls import SetClassifier, Tracklet
from lacoste.synthdata import generate_dataset

SCENE = SceneConfig(image_size=(32, 32), radius_range=(4.0, 7.0), objects_per_clip=(1, 2), clip_length=4,
                    noise_std=0.02)


def small_config(**changes) -> Config:
    cfg = Config()
    cfg = replace(
        cfg,
        model__num_queries=6, model__embed_dim=16, model__decoder_layers=2, model__num_heads=2, model__ffn_dim=32,
        model__encoder_channels=(8, 12, 16), model__num_classes=4,
        stscls__num_layers=1, stscls__num_heads=2, stscls__token_dim=16,
        sampler__num_tracklets=8,
        lacls__patch=PatchSpec(size=16), lacls__embed_dim=16, lacls__num_layers=1, lacls__num_heads=2,
        pseudo_stereo__d_min=1.0, pseudo_stereo__d_max=3.0,
        train__batch_size=2, train__lr=1e-3, train__log_every=0, train__steps=50,
        infer__clip_length=4,
    )
    return replace(cfg, **changes) if changes else cfg


@pytest.fixture(scope="module")
def clips():
    return generate_dataset(SCENE, 3)


def make_system(cfg=None, mode="stereo", seed=0):
    cfg = cfg or small_config()
    torch.manual_seed(seed)
    from lacoste.qbs import QBSModel

    qbs = QBSModel(cfg.model)
    st = SetClassifier(cfg.stscls, cfg.model.embed_dim, cfg.model.num_classes)
    la = PatchClassifier(cfg.lacls, cfg.model.num_classes)
    return Lacoste(cfg, qbs, st, la, mode).eval()


# ---------------------------------------------------------------------------
# ensemble and merging


def test_ensemble_weighted_sum():
    cfg = EnsembleConfig(alpha_b=0.5, alpha_s=0.3, alpha_a=0.2)
    out = ensemble(np.array([0.8, 0.2]), np.array([0.6, 0.4]), np.array([0.5, 0.5]), cfg)
    assert np.allclose(out, [0.68, 0.32], atol=1e-12)


def test_ensemble_argmax_invariant_to_uniform_alpha_scaling():
    rng = np.random.default_rng(0)
    p = [rng.dirichlet(np.ones(5), size=7) for _ in range(3)]
    a = ensemble(*p, EnsembleConfig(0.2, 0.5, 0.3))
    b = ensemble(*p, EnsembleConfig(0.6, 1.5, 0.9))
    assert np.array_equal(a.argmax(1), b.argmax(1))
    assert np.allclose(a.sum(1), 1.0)


def _fp(probs, masks):
    probs = np.asarray(probs, float)
    logits = np.where(np.asarray(masks), 5.0, -5.0)
    return FinalPrediction(probs, probs, probs, probs, logits, np.zeros((len(probs), 2)))


def test_semantic_merge_examples():
    m = np.zeros((2, 4, 4), bool)
    m[0, :2, :2] = True
    m[1, 1:3, 1:3] = True
    one = _fp([[0.9, 0.05, 0.05], [0.0, 0.0, 1.0]], m)
    sem = semantic_merge(one, 5)
    assert sem[m[0]].tolist() == [1] * 4 and sem[~m[0]].sum() == 0
    two = _fp([[0.9, 0.05, 0.05], [0.2, 0.6, 0.2]], m)
    sem = semantic_merge(two, 5)
    assert sem[1, 1] == 1  # overlap takes the 0.9 instance
    assert sem[2, 2] == 2
    empty = _fp([[0.1, 0.1, 0.8], [0.0, 0.0, 1.0]], m)
    assert not semantic_merge(empty, 5).any()
    assert semantic_merge(two, 1)[2, 2] == 0  # top-1 keeps only the confident instance
    with pytest.raises(ValueError):
        semantic_merge(two, 0)


# ---------------------------------------------------------------------------
# memory bank


def test_memory_bank_hit_and_lru():
    bank = MemoryBank(capacity=1)
    calls = []

    def make(v):
        def thunk():
            calls.append(v)
            return v
        return thunk

    assert memory_get_or_compute(bank, "a", make(1)) == 1
    assert memory_get_or_compute(bank, "a", make(2)) == 1
    assert calls == [1]
    memory_get_or_compute(bank, "b", make(3))
    assert memory_get_or_compute(bank, "a", make(4)) == 4
    assert calls == [1, 3, 4]


def test_memory_bank_single_writer_per_key():
    bank = MemoryBank(capacity=8)
    count = []
    gate = threading.Event()

    def slow():
        gate.wait(1)
        count.append(1)
        return object()

    results = []
    threads = [threading.Thread(target=lambda: results.append(bank.get_or_compute("k", slow))) for _ in range(6)]
    for t in threads:
        t.start()
    gate.set()
    for t in threads:
        t.join()
    assert len(count) == 1
    assert all(r is results[0] for r in results)


def test_sliding_window_with_bank_matches_without(clips):
    system = make_system()
    clip = clips[0]
    bank = MemoryBank(64)
    with_bank = infer_sequence(system, clip, bank)
    without = infer_sequence(system, clip, None)
    for a, b in zip(with_bank, without):
        assert np.abs(a.probs - b.probs).max() <= 1e-6
        assert np.array_equal(a.mask_logits, b.mask_logits)
    assert bank.computes == clip.length


def test_bank_recomputes_one_timestamp_per_slide(clips):
    system = make_system()
    clip = clips[1]
    bank = MemoryBank(64)
    counts = []
    for t in range(clip.length):
        before = bank.computes
        infer_clip(system, clip, t, bank)
        counts.append(bank.computes - before)
    # window of 4 centred at index 2: frames t-2 .. t+1, clamped to the clip
    assert counts == [2, 1, 1, 0]


# ---------------------------------------------------------------------------
# inference


def test_frame_only_ensemble_is_bitwise_frame_step(clips):
    cfg = small_config(ensemble__alpha_b=1.0, ensemble__alpha_s=0.0, ensemble__alpha_a=0.0)
    system = make_system(cfg)
    fp = infer_clip(system, clips[0], 1)
    assert np.array_equal(fp.probs, fp.p_frame)


def test_masks_pass_through_from_frame_step(clips):
    system = make_system()
    clip = clips[0]
    fp = infer_clip(system, clip, 2)
    outs = frame_step(system, clip, [0, 1, 2, 3], align=True)
    assert np.array_equal(fp.mask_logits, outs[2].mask_logits[-1][0].numpy())
    assert np.array_equal(fp.masks, outs[2].mask_logits[-1][0].numpy() > 0)


def test_single_timestamp_clip_with_duplicated_view(clips):
    cfg = small_config(infer__clip_length=1)
    system = make_system(cfg)
    clip = dataclasses.replace(clips[0], right=clips[0].left.copy())
    fp = infer_clip(system, clip, 0)
    assert np.allclose(fp.probs.sum(1), 1.0, atol=1e-6)
    outs = frame_step(system, clip, [0], align=True)
    emb = torch.stack([o.embeddings[-1] for o in outs])
    assert emb.shape[0] * emb.shape[1] == 2  # M = 2 items per tracklet


def test_missing_component_is_a_configuration_error(clips):
    system = make_system()
    system.stscls = None
    with pytest.raises(ConfigurationError):
        infer_clip(system, clips[0], 0)
    system = make_system()
    system.lacls = None
    with pytest.raises(ConfigurationError):
        infer_clip(system, clips[0], 0)


def test_all_empty_tracklets_fall_back_to_frame_distribution(clips):
    system = make_system()
    with torch.no_grad():
        system.qbs.heads.cls.bias[:-1] = -100.0  # every query predicts no object
    clip = clips[0]
    outs = frame_step(system, clip, [0, 1, 2, 3], align=True)
    p_b = outs[1].logits[-1][0].softmax(-1)
    with torch.no_grad():
        p_s = tracklet_step(system, outs, p_b)
    assert torch.equal(p_s, p_b)


def test_tracklet_and_agnostic_steps_commute(clips):
    system = make_system()
    clip = clips[2]
    with torch.no_grad():
        outs = frame_step(system, clip, [0, 1, 2, 3], align=True)
        p_b = outs[2].logits[-1][0].softmax(-1)
        m = outs[2].mask_logits[-1][0]
        s1 = tracklet_step(system, outs, p_b)
        a1, _ = agnostic_step(system, clip.left[2], p_b, m)
        a2, _ = agnostic_step(system, clip.left[2], p_b, m)
        s2 = tracklet_step(system, outs, p_b)
    assert torch.equal(s1, s2) and torch.equal(a1, a2)


def test_non_object_queries_get_uniform_agnostic_distribution(clips):
    system = make_system()
    with torch.no_grad():
        system.qbs.heads.cls.bias[:-1] = -100.0
    fp = infer_clip(system, clips[0], 1)
    assert np.allclose(fp.p_agnostic, 1 / 5)


def test_pseudo_stereo_inference_on_monocular_clip(clips):
    system = make_system(mode="pseudo")
    mono = dataclasses.replace(clips[0], right=None)
    fp = infer_clip(system, mono, 1)
    assert np.allclose(fp.probs.sum(1), 1.0, atol=1e-6)
    stereo = make_system(mode="stereo")
    with pytest.raises(DataError):
        infer_clip(stereo, mono, 1)


def test_blank_fill_mode_runs(clips):
    cfg = small_config(pseudo_stereo__fill_mode="blank_with_mask")
    system = make_system(cfg, mode="pseudo")
    fp = infer_clip(system, clips[0], 0)
    assert np.isfinite(fp.probs).all()


# ---------------------------------------------------------------------------
# training


def _trajectory(clips, cfg, steps, mode="stereo"):
    state = TrainState(cfg, mode)
    batch = [(clips[0], 0, 2), (clips[1], 1, 3)]
    return [train_step(state, batch) for _ in range(steps)], state


def test_fixed_seed_gives_identical_trajectory(clips):
    cfg = small_config()
    a, _ = _trajectory(clips, cfg, 3)
    b, _ = _trajectory(clips, cfg, 3)
    assert a == b


def test_zero_tracklets_reduce_to_frame_loss(clips):
    cfg = small_config(sampler__num_tracklets=0, train__use_ida=False)
    losses, _ = _trajectory(clips, cfg, 1)
    assert losses[0]["total"] == pytest.approx(losses[0]["baseline"], rel=1e-6)
    assert losses[0]["sc"] == 0 and losses[0]["lc"] == 0


@pytest.mark.parametrize("mode", ["stereo", "pseudo", "mono"])
def test_overfits_fixed_batch(clips, mode):
    cfg = small_config(train__steps=200)
    if mode == "mono":
        cfg = replace(cfg, model__use_dfp=False)
    losses, _ = _trajectory(clips, cfg, 200, mode)
    first = np.mean([x["total"] for x in losses[:10]])
    last = np.mean([x["total"] for x in losses[-10:]])
    assert last < 0.5 * first


def test_missing_ground_truth_is_a_data_error(clips):
    state = TrainState(small_config(), "stereo")
    broken = dataclasses.replace(clips[0], instances={})
    with pytest.raises(DataError):
        train_step(state, [(broken, 0, 1)])


def test_train_loop_and_checkpoint_round_trip(clips, tmp_path):
    cfg = small_config(train__steps=3)
    state = train(clips, cfg, "stereo")
    assert len(state.history) == 3
    la = PatchClassifier(cfg.lacls, cfg.model.num_classes).eval()
    system = Lacoste(cfg, state.qbs, state.stscls, la, "stereo").eval()
    save_system(tmp_path, system)
    back = load_system(tmp_path)
    for name in ("qbs", "stscls", "lacls"):
        manifest = json.loads((tmp_path / name / "manifest.json").read_text())
        assert manifest["component"] == name
        assert all(p["dtype"] == "float32" for p in manifest["params"])
    a = infer_clip(system, clips[0], 1)
    b = infer_clip(back, clips[0], 1)
    assert np.array_equal(a.probs, b.probs)
    with pytest.raises(DataError):
        train([], cfg)


def test_tracklet_dump(tmp_path):
    trs = [Tracklet(torch.ones(2, 3), [1, 5], 1, [7, 7], [("L", 0, 1), ("R", 1, 2)]),
           Tracklet(torch.zeros(1, 3), [2], 2, [9], [("L", 3, 0)])]
    path = dump_tracklets(tmp_path / "t.jsonl", trs)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert rows[1]["embedding_offset"] == 2 and rows[0]["sources"][1] == ["R", 1, 2]
    assert np.load(tmp_path / "t.npy").shape == (3, 3)


def test_carry_identities_maps_persisting_instances_to_their_query():
    from lacoste.pipeline import _carry_identities
    from lacoste.qbs import GroundTruthSet, MatchResult

    masks = np.ones((3, 2, 2), bool)
    gt = GroundTruthSet([1, 2, 3], masks, [7, 8, 9])
    gt_next = GroundTruthSet([3, 1, 4], masks, [9, 7, 11])
    match = MatchResult(np.array([0, 1, 2]), np.array([4, 0, 2]), 0.0)
    assert _carry_identities(match, gt, gt_next) == {0: 2, 1: 4}
