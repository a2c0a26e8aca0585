import json
import subprocess

import numpy as np

import immlab


def run(cli, *args):
    return subprocess.run([cli, *map(str, args)], capture_output=True, text=True)


def models(tmp_path):
    base = immlab.init_model(seed=0, n_layers=2, d_model=8, n_heads=2, d_ff=16, max_seq_len=48)
    sft = immlab.init_model(seed=1, n_layers=2, d_model=8, n_heads=2, d_ff=16, max_seq_len=48)
    base.save(tmp_path / "base.safetensors")
    sft.save(tmp_path / "sft.safetensors")
    return tmp_path / "base.safetensors", tmp_path / "sft.safetensors"


def test_help_and_usage_errors(cli):
    assert run(cli, "--help").returncode == 0
    assert run(cli, "merge", "--help").returncode == 0
    assert run(cli, "merge").returncode == 3
    assert run(cli, "frobnicate").returncode == 3
    assert run(cli, "--version").returncode == 0


def test_merge_alpha_one_reproduces_base(cli, tmp_path):
    base, sft = models(tmp_path)
    out = tmp_path / "m.safetensors"
    r = run(cli, "merge", "--base", base, "--sft", sft, "--out", out, "--alpha", 1, "--drop-rate", 0.5)
    assert r.returncode == 0, r.stderr
    assert out.read_bytes() == base.read_bytes()
    assert json.loads(r.stdout)["alpha"] == 1


def test_merge_matches_module(cli, tmp_path):
    base, sft = models(tmp_path)
    out = tmp_path / "m.safetensors"
    r = run(cli, "merge", "--base", base, "--sft", sft, "--out", out, "--alpha", 0.5, "--drop-rate", 0.5,
            "--seed", 9)
    assert r.returncode == 0, r.stderr
    expect = immlab.merge(immlab.load_checkpoint(base), immlab.load_checkpoint(sft), alpha=0.5, drop_rate=0.5,
                          seed=9)
    got = immlab.load_checkpoint(out)
    for name, t in expect.tensors.items():
        np.testing.assert_array_equal(got.tensors[name], t)


def test_iimm_without_importance_is_a_config_error(cli, tmp_path):
    base, sft = models(tmp_path)
    r = run(cli, "merge", "--base", base, "--sft", sft, "--out", tmp_path / "m.safetensors", "--mode", "iimm")
    assert r.returncode == 3
    assert "importance" in r.stderr


def test_iimm_with_importance_file(cli, tmp_path):
    base, sft = models(tmp_path)
    imp = tmp_path / "imp.json"
    imp.write_text("[2.0, 1.0]")
    r = run(cli, "merge", "--base", base, "--sft", sft, "--out", tmp_path / "m.safetensors", "--mode", "iimm",
            "--importance-file", imp)
    assert r.returncode == 0, r.stderr


def test_analyze(cli, tmp_path):
    base, sft = models(tmp_path)
    r = run(cli, "analyze", "--model", sft, "--against", base, "--out", tmp_path / "a.csv")
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "a.csv").read_text().startswith("layer_index,weight_change,change_percent")
    report = json.loads((tmp_path / "a.json").read_text())
    assert abs(sum(report["change_percent"]) - 100.0) < 1e-9
    same = run(cli, "analyze", "--model", base, "--against", base, "--out", tmp_path / "b.csv")
    assert same.returncode == 2


def test_missing_and_corrupt_inputs(cli, tmp_path):
    base, sft = models(tmp_path)
    r = run(cli, "merge", "--base", tmp_path / "none.safetensors", "--sft", sft, "--out", tmp_path / "m.safetensors")
    assert r.returncode == 4
    bad = tmp_path / "bad.safetensors"
    bad.write_bytes(b"\x05\x00\x00\x00\x00\x00\x00\x00{oops")
    r = run(cli, "merge", "--base", bad, "--sft", sft, "--out", tmp_path / "m.safetensors")
    assert r.returncode == 4


def test_invalid_lab_config(cli, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"iterations": 1, "no_such_key": 2}))
    r = run(cli, "lab", "--config", cfg, "--out-dir", tmp_path / "out")
    assert r.returncode == 3
    cfg.write_text("{not json")
    assert run(cli, "lab", "--config", cfg, "--out-dir", tmp_path / "out").returncode == 3


def test_lab_with_zero_iterations_writes_base_only_manifest(cli, tmp_path):
    model = {"vocab_size": 32, "d_model": 8, "n_layers": 2, "n_heads": 2, "d_ff": 16, "max_seq_len": 128}
    base = immlab.init_model(seed=0, n_layers=2, d_model=8, n_heads=2, d_ff=16, max_seq_len=128)
    base.save(tmp_path / "base.safetensors")
    cfg = immlab.lab_config(model=model, eval_sets={"ADD": 2, "SUB": 2}, eval_samples=2, pass_k_values=[1, 2],
                            max_new_tokens=8)
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    r = run(cli, "lab", "--config", tmp_path / "cfg.json", "--out-dir", tmp_path / "out", "--iterations", 0,
            "--base-checkpoint", tmp_path / "base.safetensors")
    assert r.returncode == 0, r.stderr
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["iterations"] == []
    assert set(manifest["base"]["eval"]["kinds"]) == {"ADD", "SUB"}
    assert immlab.load_checkpoint(tmp_path / "out" / "base.safetensors") == immlab.load_checkpoint(
        tmp_path / "base.safetensors")
