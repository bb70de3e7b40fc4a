import json

import pytest

from sctd.cli import build_parser, main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["corpus", "--out", str(d / "corpus.txt"), "--n", "800", "--seed", "1"]) == 0
    assert main(["corpus", "--out", str(d / "eval.txt"), "--n", "40", "--seed", "2"]) == 0
    assert main(["corpus", "--out", str(d / "task.tsv"), "--n", "200", "--seed", "3", "--probe", "tense"]) == 0
    cfg = {
        "model": {"n_layers": 4, "d_model": 16, "n_heads": 2, "max_seq": 32},
        "schedule": {"mode": "sctd", "interval": 10, "weight": 0.05},
        "optimizer": {"total_steps": 20, "batch_size": 8},
        "data": {"corpus": str(d / "corpus.txt"), "max_len": 32, "vocab_size": 300},
        "run": {"eval_interval": 10, "eval_batches": 1, "checkpoint_every": 10, "record_timing": False},
    }
    (d / "cfg.json").write_text(json.dumps(cfg))
    assert main(["pretrain", "--config", str(d / "cfg.json"), "--out", str(d / "run")]) == 0
    return d


def read_metrics(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_pretrain_outputs_and_sc_schedule(workdir):
    run = workdir / "run"
    for name in ("manifest.json", "metrics.jsonl", "validation.jsonl", "ckpt_10.sctd", "ckpt_20.sctd", "final.sctd"):
        assert (run / name).exists(), name
    metrics = read_metrics(run / "metrics.jsonl")
    assert [m["t"] for m in metrics if m["mode"] == "sc"] == [10, 20]
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["config"]["schedule"]["mode"] == "sctd"


def test_pretrain_baseline_has_no_routing_fields(workdir, capsys):
    out = workdir / "base"
    assert main(["pretrain", "--config", str(workdir / "cfg.json"), "--mode", "baseline", "--steps", "3",
                 "--out", str(out)]) == 0
    for m in read_metrics(out / "metrics.jsonl"):
        assert m["mode"] == "baseline" and "keep_frac" not in m


def test_pretrain_resume_matches_uninterrupted(workdir):
    out = workdir / "staged"
    args = ["pretrain", "--config", str(workdir / "cfg.json"), "--out", str(out)]
    assert main(args + ["--stop-after", "14"]) == 0
    assert main(args + ["--resume", str(out / "ckpt_10.sctd")]) == 0
    assert (out / "metrics.jsonl").read_bytes() == (workdir / "run" / "metrics.jsonl").read_bytes()


def test_flops_keep_one_prints_zero_reduction(capsys):
    assert main(["flops", "--keep", "1.0"]) == 0
    assert capsys.readouterr().out.strip().splitlines()[-1] == "reduction: 0.0000"


def test_flops_json(capsys):
    assert main(["flops", "--keep", "0.5", "--json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert 0 < rep["reduction"] < 1


def test_probe_all_layers_gives_five_rows(workdir, capsys):
    assert main(["probe", "--checkpoint", str(workdir / "run" / "final.sctd"), "--task",
                 str(workdir / "task.tsv"), "--layer", "all", "--epochs", "30"]) == 0
    rows = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert [r["layer"] for r in rows] == [0, 1, 2, 3, 4]


def test_probe_single_layer_and_bounds(workdir, capsys):
    ck, task = str(workdir / "run" / "final.sctd"), str(workdir / "task.tsv")
    assert main(["probe", "--checkpoint", ck, "--task", task, "--layer", "2", "--epochs", "10"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 1
    assert main(["probe", "--checkpoint", ck, "--task", task, "--layer", "9"]) == 1


def test_drift_rate_zero_is_one(workdir, tmp_path):
    out = tmp_path / "drift.jsonl"
    assert main(["drift", "--checkpoints", str(workdir / "run" / "ckpt_*.sctd"), "--eval",
                 str(workdir / "eval.txt"), "--corruption", "drop", "--rate", "0", "--out", str(out)]) == 0
    recs = [json.loads(x) for x in out.read_text().splitlines()]
    assert [r["snapshot"].rsplit("_", 1)[-1] for r in recs] == ["10.sctd", "20.sctd"]
    assert all(r["mean"] == 1.0 for r in recs)


def test_drift_is_deterministic(workdir, capsys):
    args = ["drift", "--checkpoints", str(workdir / "run" / "final.sctd"), "--eval", str(workdir / "eval.txt"),
            "--corruption", "mask", "--rate", "0.3", "--seed", "4"]
    main(args)
    a = capsys.readouterr().out
    main(args)
    assert capsys.readouterr().out == a


def test_exit_codes(workdir, tmp_path, monkeypatch):
    with pytest.raises(SystemExit) as e:
        main(["pretrain", "--out", str(tmp_path / "x"), "--bogus"])
    assert e.value.code == 1
    assert main(["pretrain", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == 1
    (tmp_path / "bad.json").write_text('{"model": {"nope": 1}}')
    assert main(["pretrain", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "x")]) == 1
    assert main(["probe", "--checkpoint", str(tmp_path / "none.sctd"), "--task", str(workdir / "task.tsv")]) == 3
    assert main(["drift", "--checkpoints", str(tmp_path / "*.sctd"), "--eval", str(workdir / "eval.txt"),
                 "--corruption", "mask", "--rate", "0.1"]) == 1
    monkeypatch.setenv("SCTD_THREADS", "zero")
    assert main(["flops"]) == 1
    monkeypatch.setenv("SCTD_THREADS", "1")
    assert main(["flops"]) == 0


def test_non_finite_abort_exits_two(workdir, tmp_path):
    cfg = json.loads((workdir / "cfg.json").read_text())
    cfg["optimizer"].update(peak_lr=1e38, max_grad_norm=1e38, warmup_steps=0)
    (tmp_path / "hot.json").write_text(json.dumps(cfg))
    code = main(["pretrain", "--config", str(tmp_path / "hot.json"), "--out", str(tmp_path / "hot")])
    assert code == 2
    assert (tmp_path / "hot" / "abort_dump.json").exists()


def test_help_lists_every_flag():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)
