import importlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from dualmem.config import ModelConfig, TrainConfig, dump_flat, load_train_config
from dualmem.errors import DataError, DegenerateTestError, TrainingAborted
from dualmem.harness import cli
from dualmem.harness.ablation import AblationTable, MEMORY_ABLATIONS
from dualmem.harness.analysis import PLOT_HEADER, analyze_traces, trace_steps
from dualmem.harness.data import EpisodeCache, collate, expert_action
from dualmem.harness.evaluate import (ConstantAgent, ExpertReplayAgent, compute_qa_metrics, compute_spl,
                                      max_rollout_steps, mra_score, rollout, rollout_many)
from dualmem.harness.report import EvalReport, evaluate
from dualmem.harness.stats import wilcoxon_signed_rank
from dualmem.harness.train import finetune, pretrain, train
from dualmem.policy import Variant, load_checkpoint
from dualmem.worldgen import LEFT, STOP, LayoutConfig
from dualmem.worldgen.dataset import Workload, generate_dataset
from dualmem.worldgen.episodes import QAItem
from dualmem.worldgen.expert import execute

# the package re-exports train(), which shadows the submodule attribute
train_mod = importlib.import_module("dualmem.harness.train")

from oracles import mra_direct, shortest_cells, spl_direct, wilcoxon_enumerate

TINY_MODEL = ModelConfig(d_model=16, n_world=4, backbone_layers=1, backbone_heads=2, ff_mult=2, traj_layers=1,
                         traj_heads=2, patch_grid=2, max_traj_len=16, pcd_cap=64)
TINY_LAYOUT = LayoutConfig(width=10, height=10, n_rooms=3, n_objects=5)


def tiny_cfg(**kw):
    base = dict(model=TINY_MODEL, pretrain_steps=4, total_steps=4, warmup_steps=2, pretrain_warmup=2,
                batch_episodes=3, steps_per_episode=2, peak_lr=1e-3, pretrain_lr=1e-3, qa_fraction=0.2)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_ds():
    return generate_dataset(Workload(seed=0, n_layouts=2, episodes_per_layout=6, n_seen_eval_layouts=1,
                                     n_unseen_layouts=1, eval_episodes_per_layout=2, n_eval_seeds=2,
                                     layout=TINY_LAYOUT))


@pytest.fixture(scope="module")
def cache(tiny_ds):
    return EpisodeCache(tiny_ds.layouts)


# --------------------------------------------------------------------------
# SPL / SR


def test_spl_hand_cases():
    assert compute_spl([(True, 5, 5)]) == (1.0, 1.0)
    assert compute_spl([(True, 5, 10)]) == (1.0, 0.5)
    assert compute_spl([(False, 5, 3)]) == (0.0, 0.0)
    assert compute_spl([(True, 0, 0)]) == (1.0, 1.0)
    with pytest.raises(DataError):
        compute_spl([(True, -1, 3)])
    with pytest.raises(DataError):
        compute_spl([])


def test_spl_matches_direct_and_never_exceeds_sr():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        recs = [(bool(rng.random() < 0.5), int(rng.integers(1, 30)), int(rng.integers(0, 60))) for _ in range(n)]
        sr, spl = compute_spl(recs)
        assert spl == pytest.approx(spl_direct(recs), abs=1e-12)
        assert 0.0 <= spl <= sr + 1e-12 <= 1.0 + 1e-12


# --------------------------------------------------------------------------
# QA metrics


def test_mra_threshold_enumeration():
    assert mra_score(13.0, 10.0) == 0.4
    assert mra_score(10.0, 10.0) == 1.0
    assert mra_score(20.0, 10.0) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 50), st.integers(0, 200))
def test_mra_matches_direct(truth, pred):
    assert mra_score(float(pred), float(truth)) == mra_direct(pred, truth)


def test_qa_metrics_aggregate_and_unparseable():
    items = [
        (QAItem("obj_count", "q", "3"), "3"),
        (QAItem("obj_count", "q", "10"), "13"),
        (QAItem("abs_dist", "q", "4"), "four"),
        (QAItem("rel_dir", "q", "b", ["front", "back"]), "B"),
        (QAItem("rel_dir", "q", "b", ["front", "back"]), "z"),
        (QAItem("support", "q", "desk"), "desk"),
    ]
    m = compute_qa_metrics(items)
    assert m.per_category["obj_count"] == pytest.approx(0.7)
    assert m.per_category["abs_dist"] == 0.0
    assert m.per_category["rel_dir"] == 0.5
    assert m.per_category["support"] == 1.0
    assert m.unparseable == 2
    # support is reported but not part of the standard average
    assert m.avg == pytest.approx((0.7 + 0.0 + 0.5) / 3)
    with pytest.raises(DataError):
        compute_qa_metrics([(QAItem("obj_size", "q", "0"), "1")])


# --------------------------------------------------------------------------
# Wilcoxon


def test_wilcoxon_hand_cases():
    r = wilcoxon_signed_rank([(i + 1.0, 0.0) for i in range(5)])
    assert r.statistic == 15 and r.p_value == pytest.approx(2 / 32) and r.exact
    with pytest.raises(DegenerateTestError):
        wilcoxon_signed_rank([(1.0, 1.0)] * 6)
    sym = wilcoxon_signed_rank([(1, 0), (0, 1), (2, 0), (0, 2), (3, 0), (0, 3)])
    assert sym.p_value == 1.0


def test_wilcoxon_exact_matches_enumeration():
    rng = np.random.default_rng(0)
    for trial in range(100):
        n = int(rng.integers(1, 11))
        # small integer differences give plenty of ties
        a = rng.integers(-4, 5, size=n).astype(float)
        if not np.any(a != 0):
            a[0] = 1.0
        r = wilcoxon_signed_rank(list(zip(a, np.zeros(n))))
        w, p = wilcoxon_enumerate(list(a))
        assert r.statistic == pytest.approx(w, abs=1e-12)
        assert r.p_value == pytest.approx(p, abs=1e-12)


def test_wilcoxon_normal_branch_matches_scipy():
    rng = np.random.default_rng(1)
    for _ in range(20):
        d = np.round(rng.normal(0.3, 1.0, size=int(rng.integers(13, 40))), 1)
        d = d[d != 0]
        r = wilcoxon_signed_rank(list(zip(d, np.zeros(len(d)))))
        ref = sps.wilcoxon(d, correction=True, method="approx")
        assert not r.exact
        assert r.p_value == pytest.approx(ref.pvalue, rel=1e-9)


# --------------------------------------------------------------------------
# rollouts


def test_expert_replay_succeeds_on_shortest_path(tiny_ds):
    eps = tiny_ds.episodes
    results = rollout_many(ExpertReplayAgent(), eps, tiny_ds.layouts)
    for ep, r in zip(eps, results):
        assert r.success and r.reason == "stop"
        assert r.path_length == ep.shortest_path_length
    assert compute_spl(results) == (1.0, 1.0)


def test_stop_agent_fails_with_zero_path(tiny_ds):
    ep = next(e for e in tiny_ds.episodes if shortest_cells(tiny_ds.layout_of(e), (e.start.x, e.start.y), e.goal) > 1)
    r = rollout(ConstantAgent(STOP), ep, tiny_ds.layout_of(ep))
    assert not r.success and r.path_length == 0 and r.actions == [STOP]


def test_never_stopping_agent_hits_step_limit(tiny_ds):
    ep = tiny_ds.episodes[0]
    lay = tiny_ds.layout_of(ep)
    diameter = max(max(shortest_cells(lay, a, b) for b in lay.free_cells()) for a in lay.free_cells()[:5])
    r = rollout(ConstantAgent(LEFT), ep, lay, max_steps=2 * diameter)
    assert r.reason == "max_steps" and len(r.actions) == 2 * diameter and not r.success
    assert max_rollout_steps(ep) >= 20


# --------------------------------------------------------------------------
# data


def test_expert_action_follows_the_stored_path(tiny_ds):
    agree = total = 0
    for ep in tiny_ds.split("train"):
        lay = tiny_ds.layout_of(ep)
        poses = execute(lay, ep.start, ep.actions)
        assert expert_action(lay, poses, ep) == STOP
        for t in range(len(ep.actions)):
            agree += expert_action(lay, poses[:t + 1], ep) == ep.actions[t]
            total += 1
    # waypoints count as reached within the success radius, which can shorten a revisit leg
    assert agree / total > 0.95


def test_perturbed_step_is_labelled_from_its_pose(tiny_ds, cache):
    rng = np.random.default_rng(0)
    for ep in tiny_ds.split("train")[:6]:
        t = int(rng.integers(len(ep.actions)))
        s = cache.perturbed_step(ep, t, rng, 3)
        lay = tiny_ds.layout_of(ep)
        assert s.history[:t] == ep.actions[:t] and 1 <= len(s.history) - t <= 3
        poses = execute(lay, ep.start, s.history)
        assert s.target == [expert_action(lay, poses, ep)]
        assert s.semantic.shape == cache.nav_step(ep, 0).semantic.shape


def test_collate_shapes_and_masks(tiny_ds, cache):
    eps = tiny_ds.split("train")
    samples = [cache.nav_step(eps[0], 0), cache.nav_step(eps[1], 3), cache.qa_step(eps[2], 0)]
    b = collate(samples, 16)
    assert b.instr_ids.shape[0] == 3 and b.instr_ids.shape[1] % 8 == 0
    assert b.instr_mask.sum(1).tolist() == [len(s.tokens) for s in samples]
    assert b.points.shape[1] % 64 == 0
    assert b.points_mask.sum(1).tolist() == [s.points.shape[0] for s in samples]
    assert b.is_nav.tolist() == [True, True, False]
    # teacher forcing: generated stream is BOS then the target shifted by one
    k = len(samples[2].target)
    assert b.gen_mask[2].sum() == k and b.targets[2, :k].tolist() == samples[2].target
    assert b.gen_mask[0].sum() == 1 and b.targets[0, 0] == samples[0].target[0]
    free = collate(samples, 16, teacher_forcing=False)
    assert free.gen_ids.shape[1] == 1


# --------------------------------------------------------------------------
# reports and ablation tables


def test_eval_report_serialization_excludes_runtime(tmp_path):
    r = EvalReport("abc", 0, {"val_seen": {"SR": 0.5, "SPL": 0.25, "n_episodes": 2,
                                           "per_seed": [{"eval_seed": 0, "SR": 0.5, "SPL": 0.25, "n": 2}]}})
    r.runtime_seconds = 12.0
    a = r.to_json()
    r.runtime_seconds = 99.0
    assert r.to_json() == a and "runtime" not in a
    txt, js = r.save(tmp_path)
    assert json.loads(js.read_text())["navigation"]["val_seen"]["SR"] == 0.5
    assert "val_seen" in txt.read_text()
    r.navigation["val_seen"]["SR"] = 1.5
    with pytest.raises(ValueError):
        r.validate()


def test_ablation_table_statistics():
    seeds = [0, 1, 2, 3, 4]
    sr = {"full": [0.9, 0.8, 0.85, 0.9, 0.95], "no_episodic": [0.5, 0.6, 0.4, 0.5, 0.55],
          "no_spatial": [0.7] * 5, "no_grounding": [0.8] * 5, "no_trajectory": [0.6, 0.7, 0.7, 0.7, 0.7]}
    t = AblationTable(seeds, list(sr))
    for v, vals in sr.items():
        for s, x in zip(seeds, vals):
            t.rows.append({"seed": s, "variant": v, "SR": x, "SPL": x})
    assert t.mean_sr()["full"] == pytest.approx(0.88)
    assert t.delta_sr()["no_episodic"] == pytest.approx(0.88 - 0.51)
    assert t.lowest_memory_ablation_per_seed() == ["no_episodic"] * 5
    w = t.wilcoxon()
    assert w["no_episodic"]["p"] == pytest.approx(0.0625) and w["no_episodic"]["W"] == 15
    assert set(MEMORY_ABLATIONS) <= set(t.variants)
    assert len([r for r in t.rows if r["variant"] == "full"]) == 5


# --------------------------------------------------------------------------
# training


def test_zero_weights_log_total_equal_to_ce(tiny_ds, cache):
    cfg = tiny_cfg(lambda_s=0.0, lambda_e=0.0)
    res = train(cfg, tiny_ds, cache=cache)
    assert all(r["L_total"] == r["L_CE"] for r in res.log)
    assert {r["phase"] for r in res.log} == {"pretrain", "lora"}


def test_composite_loss_logs_every_component(tiny_ds, cache):
    cfg = tiny_cfg()
    res = train(cfg, tiny_ds, cache=cache)
    lora = [r for r in res.log if r["phase"] == "lora"]
    for r in lora:
        assert r["L_total"] == pytest.approx(r["L_CE"] + 0.1 * r["L_spatial"] + 0.1 * r["L_episodic"], rel=1e-12)
        assert r["L_spatial"] > 0 and r["L_episodic"] > 0


def test_training_is_bit_deterministic(tiny_ds, cache, tmp_path):
    cfg = tiny_cfg(perturb_prob=0.5)
    a = train(cfg, tiny_ds, tmp_path / "a", cache=cache)
    b = train(cfg, tiny_ds, tmp_path / "b", cache=EpisodeCache(tiny_ds.layouts))
    assert [r["L_total"] for r in a.log] == [r["L_total"] for r in b.log]
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    assert (tmp_path / "a" / "train_log.jsonl").read_text() == (tmp_path / "b" / "train_log.jsonl").read_text()


def test_lora_phase_only_touches_adapters_and_memories(tiny_ds, cache):
    cfg = tiny_cfg()
    pre = pretrain(cfg, tiny_ds, cache=cache).model
    before = {n: p.data.copy() for n, p in pre.named_parameters()}
    model = finetune(cfg, tiny_ds, train_mod.clone_model(pre), cache=cache).model
    frozen = model.backbone_names()
    assert frozen
    changed = []
    for name, p in model.named_parameters():
        if name in frozen:
            np.testing.assert_array_equal(p.data, before[name], err_msg=name)
        elif name in before and not np.array_equal(p.data, before[name]):
            changed.append(name)
    assert changed


def test_descent_on_small_workload(cache, tiny_ds):
    # 100 steps on 32 episodes: the loss at the end is below the loss at the start
    ds = generate_dataset(Workload(seed=3, n_layouts=4, episodes_per_layout=8, n_seen_eval_layouts=0,
                                   n_unseen_layouts=0, layout=TINY_LAYOUT))
    assert len(ds.split("train")) == 32
    cfg = tiny_cfg(pretrain_steps=100, pretrain_warmup=10, batch_episodes=8, qa_fraction=0.0)
    log = pretrain(cfg, ds).log
    first = np.mean([r["L_CE"] for r in log[:10]])
    last = np.mean([r["L_CE"] for r in log[-10:]])
    assert last < first


def test_nan_loss_aborts_with_last_good_checkpoint(tiny_ds, cache, tmp_path, monkeypatch):
    real = train_mod.total_loss
    calls = {"n": 0}

    def poisoned(ce, *args, **kw):
        calls["n"] += 1
        out = real(ce, *args, **kw)
        if calls["n"] == 3:
            out = out * float("nan")
        return out

    monkeypatch.setattr(train_mod, "total_loss", poisoned)
    with pytest.raises((TrainingAborted, FloatingPointError)):
        pretrain(tiny_cfg(), tiny_ds, out_dir=tmp_path, cache=cache)
    assert (tmp_path / "last_good.ckpt").exists()
    model, header = load_checkpoint(tmp_path / "last_good.ckpt")
    assert header["phase"] == "pretrain"
    assert all(np.isfinite(p.data).all() for _, p in model.named_parameters())


# --------------------------------------------------------------------------
# evaluation and analysis end to end


def test_evaluate_and_analyze(tiny_ds, cache, tmp_path):
    cfg = tiny_cfg()
    model = train(cfg, tiny_ds, cache=cache).model
    variant = Variant.from_train_config(cfg)
    rep = evaluate(model, variant, tiny_ds, cfg.config_hash(), 0, cache=cache)
    assert set(rep.navigation) == {"val_seen", "val_unseen"}
    assert len(rep.navigation["val_seen"]["per_seed"]) == 2
    for nav in rep.navigation.values():
        assert 0 <= nav["SPL"] <= nav["SR"] <= 1
    assert rep.qa
    ana = analyze_traces(model, variant, tiny_ds, cache)
    assert ana.stats.intra >= 0 and ana.stats.inter >= 0
    path = ana.write_plot_data(tmp_path / "d.tsv")
    lines = path.read_text().splitlines()
    assert lines[0] == PLOT_HEADER and len(lines) == 1 + ana.n_traces * (ana.n_traces - 1) // 2
    assert trace_steps(10, 4) == [0, 3, 6, 9] and trace_steps(2, 4) == [0, 1]


# --------------------------------------------------------------------------
# configuration and CLI


def test_config_file_roundtrip(tmp_path):
    cfg = tiny_cfg(seed=7, no_grounding=True)
    p = tmp_path / "c.cfg"
    p.write_text(dump_flat(cfg) + "workload.n_layouts = 3\nlayout.width = 12\n")
    back = load_train_config(p)
    assert back == cfg and back.config_hash() == cfg.config_hash()
    w = cli.load_workload(str(p), seed=5)
    assert w.n_layouts == 3 and w.layout.width == 12 and w.seed == 5
    p.write_text("bogus_key = 1\n")
    with pytest.raises(KeyError):
        load_train_config(p)
    with pytest.raises(ValueError):
        tiny_cfg(lambda_s=-1.0).validate()


def _write_tiny_config(path):
    cfg = tiny_cfg(qa_fraction=0.0)
    path.write_text(dump_flat(cfg) + "\n".join([
        "workload.n_layouts = 2", "workload.episodes_per_layout = 5", "workload.n_seen_eval_layouts = 1",
        "workload.n_unseen_layouts = 1", "workload.eval_episodes_per_layout = 2", "workload.n_eval_seeds = 1",
        "layout.width = 10", "layout.height = 10", "layout.n_rooms = 3", "layout.n_objects = 5",
        "episode.kind_weights = 0.4,0.25,0.1,0.25"]) + "\n")


def test_cli_pipeline(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "tiny.cfg"
    _write_tiny_config(cfg)
    out = tmp_path / "run"
    monkeypatch.delenv(cli.OUT_ENV, raising=False)
    common = ["--config", str(cfg), "--out", str(out)]
    assert cli.main(["gen-data", *common]) == 0
    assert (out / "dataset.jsonl").exists() and (out / "layouts.txt").read_text().startswith("[seen-000]")
    assert cli.main(["train", *common]) == 0
    assert (out / "model.ckpt").exists() and (out / "train_log.jsonl").exists()
    assert cli.main(["eval", *common, "--no-qa"]) == 0
    rep = json.loads((out / "eval_report.json").read_text())
    assert "runtime_seconds" not in rep and set(rep["navigation"]) == {"val_seen", "val_unseen"}
    assert cli.main(["analyze", *common]) == 0
    assert (out / "episodic_distances.tsv").exists()


def test_cli_env_out_dir_wins(tmp_path, monkeypatch):
    cfg = tmp_path / "tiny.cfg"
    _write_tiny_config(cfg)
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "env" / "dataset.jsonl").exists() and not (tmp_path / "flag").exists()


def test_cli_gen_data_split_ratios(tmp_path, monkeypatch):
    monkeypatch.delenv(cli.OUT_ENV, raising=False)
    cfg = tmp_path / "tiny.cfg"
    _write_tiny_config(cfg)
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path), "--layouts", "5",
                     "--episodes-per-layout", "10", "--splits", "0.7,0.1,0.2"]) == 0
    ds = cli.load_dataset(tmp_path / "dataset.jsonl")
    assert len({e.layout_id for e in ds.split("val_unseen")}) == 1
    # 10 episodes on each seen layout: 1/8 of them held out for val_seen
    assert len(ds.split("train")) == 4 * 9 and len(ds.split("val_seen")) == 4


def test_cli_rejects_bad_config(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv(cli.OUT_ENV, raising=False)
    p = tmp_path / "bad.cfg"
    p.write_text("not_a_key = 3\n")
    assert cli.main(["gen-data", "--config", str(p), "--out", str(tmp_path)]) == 0  # data keys only
    assert cli.main(["train", "--config", str(p), "--out", str(tmp_path)]) == 2
    assert "unknown config key" in capsys.readouterr().err
