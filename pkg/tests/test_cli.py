import json
import subprocess
import sys
import zipfile


from voplab.cli import main
from voplab.report import read_csv

SMALL = {"corpus": {"n_pairs": 16, "n_val": 8, "seed": 1},
         "train": {"epochs": 2, "batch_size": 8, "lr": 1e-3}}


def write_config(tmp_path, name="cfg.json", **extra):
    cfg = {**SMALL, "out": str(tmp_path / "run"), **extra}
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def records(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_generate_exit_codes(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["generate", "--config", cfg]) == 0
    assert (tmp_path / "run" / "data" / "manifest.json").exists()
    assert main(["generate", "--config", cfg]) == 3
    assert main(["generate", "--config", cfg, "--force"]) == 0
    bad = write_config(tmp_path, "bad.json", corpus={"n_pairs": 1})
    assert main(["generate", "--config", bad]) == 2
    assert "n_pairs" in capsys.readouterr().err


def test_config_typos_rejected(tmp_path, capsys):
    assert main(["generate", "--config", write_config(tmp_path, "t.json", trian={})]) == 2
    assert "trian" in capsys.readouterr().err
    assert main(["generate", "--config", write_config(tmp_path, "u.json", prompts={"P_x": 1})]) == 2
    assert main(["generate", "--config", str(tmp_path / "missing.json")]) == 2


def test_train_outputs(tmp_path, capsys):
    cfg = write_config(tmp_path)
    main(["generate", "--config", cfg])
    assert main(["train", "--config", cfg]) == 0
    assert "t2v_R@1=" in capsys.readouterr().out
    out = tmp_path / "run" / "train"
    log = records(out / "log.jsonl")
    assert log[0]["kind"] == "run"
    assert sum(r["kind"] == "step" for r in log) == 2 * 2  # epochs * ceil(16 / 8)
    assert sum(r["kind"] == "epoch" for r in log) == 2
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["train"]["batch_size"] == 8 and resolved["corpus"]["n_pairs"] == 16
    schema, rows = read_csv(out / "report.csv")
    assert schema == "voplab-report/1" and rows[0]["scale"] == "toy-scale, not comparable in magnitude"
    assert main(["train", "--config", cfg]) == 3


def test_train_without_data(tmp_path):
    assert main(["train", "--config", write_config(tmp_path)]) == 2


def test_full_and_vop_share_the_dataset(tmp_path):
    cfg = write_config(tmp_path)
    main(["generate", "--config", cfg])
    main(["train", "--config", cfg, "--out", str(tmp_path / "run")])
    full = write_config(tmp_path, "full.json", protocol={"kind": "full"}, data=str(tmp_path / "run" / "data"))
    main(["train", "--config", full, "--out", str(tmp_path / "full")])
    a = records(tmp_path / "run" / "train" / "log.jsonl")[0]
    b = records(tmp_path / "full" / "train" / "log.jsonl")[0]
    assert a["dataset_sha256"] == b["dataset_sha256"]
    assert a["trainable"] != b["trainable"]


def test_rerun_with_force_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path)
    main(["generate", "--config", cfg])
    out = tmp_path / "run" / "train"
    main(["train", "--config", cfg])
    first = {p.name: p.read_bytes() for p in out.iterdir() if p.is_file() and p.name != "timing.json"}
    main(["train", "--config", cfg, "--force"])
    second = {p.name: p.read_bytes() for p in out.iterdir() if p.is_file() and p.name != "timing.json"}
    assert first == second and "checkpoint.zip" in first


def test_resume_extends_log_bitwise(tmp_path):
    cfg = write_config(tmp_path, train={"epochs": 3, "batch_size": 8, "lr": 1e-3},
                       data=str(tmp_path / "data"))
    main(["generate", "--config", cfg])
    main(["train", "--config", cfg, "--out", str(tmp_path / "whole")])
    whole = (tmp_path / "whole" / "train" / "log.jsonl").read_bytes()
    part = tmp_path / "part"
    main(["train", "--config", cfg, "--out", str(part), "--stop-after", "3"])
    cut = (part / "train" / "log.jsonl").read_bytes()
    assert whole.startswith(cut) and len(cut) < len(whole)
    assert main(["train", "--config", cfg, "--out", str(part),
                 "--resume", str(part / "train" / "checkpoint.zip")]) == 0
    assert (part / "train" / "log.jsonl").read_bytes() == whole


def test_resume_from_epoch_checkpoint(tmp_path):
    cfg = write_config(tmp_path, train={"epochs": 3, "batch_size": 8, "lr": 1e-3})
    main(["generate", "--config", cfg])
    main(["train", "--config", cfg])
    log = tmp_path / "run" / "train" / "log.jsonl"
    whole = log.read_bytes()
    main(["train", "--config", cfg, "--resume", str(tmp_path / "run" / "train" / "checkpoints" / "step-000002.zip")])
    assert log.read_bytes() == whole


def test_evaluate(tmp_path, capsys):
    cfg = write_config(tmp_path)
    main(["generate", "--config", cfg])
    main(["train", "--config", cfg])
    capsys.readouterr()
    ck = str(tmp_path / "run" / "train" / "checkpoint.zip")
    assert main(["evaluate", "--config", cfg, "--checkpoint", ck]) == 0
    assert "v2t_MdR=" in capsys.readouterr().out
    assert main(["evaluate", "--config", cfg, "--checkpoint", ck, "--split", "test"]) == 2


def test_count_params_at_clip_dims(tmp_path, capsys):
    cfg = write_config(tmp_path, "clip.json", model_preset="clip_b32",
                       prompts={"P_t": 8, "P_v": 8, "video_len": 4, "K_s": 8})
    csv_path = tmp_path / "ledger.csv"
    assert main(["count-params", "--config", cfg, "--protocols", "vop,adapter_ffn,full",
                 "--csv", str(csv_path)]) == 0
    text = capsys.readouterr().out
    assert text == csv_path.read_text()
    schema, rows = read_csv(csv_path)
    assert schema == "voplab-ledger/1"
    by = {r["method"]: r for r in rows}
    assert by["vop"]["trainable"] == "122880" and by["vop"]["percent_vs_119.8M"] == "0.103"
    assert by["adapter_ffn"]["trainable"] == "1982976" and by["adapter_ffn"]["percent_vs_119.8M"] == "1.655"
    assert by["full"]["percent_vs_reconstructed"] == "100.000"


def test_count_params_unknown_protocol(tmp_path):
    assert main(["count-params", "--protocols", "vop,lora"]) == 2


def test_ablate_empty_grid(tmp_path):
    cfg = write_config(tmp_path, ablation={"axis": "length", "values": []})
    main(["generate", "--config", cfg])
    assert main(["ablate", "--config", cfg]) == 2


def test_ablate_k_split_degenerates_to_vop(tmp_path):
    cfg = write_config(tmp_path, protocol={"kind": "vop_f"}, ablation={"axis": "k_split", "values": [2, 4]})
    main(["generate", "--config", cfg])
    assert main(["ablate", "--config", cfg]) == 0
    root = tmp_path / "run" / "ablate" / "k_split"
    _, rows = read_csv(root / "ablation.csv")
    assert [r["value"] for r in rows] == ["2", "4"]
    plain = write_config(tmp_path, "plain.json", data=str(tmp_path / "run" / "data"))
    main(["train", "--config", plain, "--out", str(tmp_path / "plain")])
    a = records(root / "4" / "log.jsonl")[1:]
    b = records(tmp_path / "plain" / "train" / "log.jsonl")[1:]
    assert a == b
    za = zipfile.ZipFile(root / "4" / "checkpoint.zip")
    zb = zipfile.ZipFile(tmp_path / "plain" / "train" / "checkpoint.zip")
    params = [n for n in zb.namelist() if n.startswith("params/")]
    assert sorted(params) == sorted(n for n in za.namelist() if n.startswith("params/"))
    for n in params:
        assert za.read(n) == zb.read(n)
    assert rows[1]["t2v_R@1"] == f"{records(tmp_path / 'plain' / 'train' / 'log.jsonl')[-1]['val']['t2v_R@1']:.3f}"


def test_ablate_cmm_rows(tmp_path):
    cfg = write_config(tmp_path, protocol={"kind": "vop_c"}, prompts={"video_len": 2},
                       train={"epochs": 1, "batch_size": 8, "lr": 1e-3})
    main(["generate", "--config", cfg])
    assert main(["ablate", "--config", cfg, "--axis", "cmm"]) == 0
    schema, rows = read_csv(tmp_path / "run" / "ablate" / "cmm" / "ablation.csv")
    assert schema == "voplab-ablation/1"
    assert [r["value"] for r in rows] == ["bilstm", "lstm", "transformer"]
    assert len({r["params"] for r in rows}) == 3
    assert main(["ablate", "--config", cfg, "--axis", "cmm"]) == 3


def test_ablate_depth_rows_sorted(tmp_path):
    cfg = write_config(tmp_path, train={"epochs": 1, "batch_size": 8, "lr": 1e-3},
                       ablation={"axis": "depth", "values": [[1, 4], [4, 4], [3, 4]]})
    main(["generate", "--config", cfg])
    assert main(["ablate", "--config", cfg]) == 0
    _, rows = read_csv(tmp_path / "run" / "ablate" / "depth" / "ablation.csv")
    assert [r["layers"] for r in rows] == ["1", "2", "4"]


def test_ablate_depth_null_means_all_layers(tmp_path):
    cfg = write_config(tmp_path, train={"epochs": 1, "batch_size": 8, "lr": 1e-3},
                       ablation={"axis": "depth", "values": [[4, 4], None]})
    main(["generate", "--config", cfg])
    assert main(["ablate", "--config", cfg]) == 0
    _, rows = read_csv(tmp_path / "run" / "ablate" / "depth" / "ablation.csv")
    assert [(r["value"], r["layers"]) for r in rows] == [("4-4", "1"), ("None", "4")]


def test_ablate_malformed_value(tmp_path, capsys):
    cfg = write_config(tmp_path, ablation={"axis": "depth", "values": [3]})
    main(["generate", "--config", cfg])
    assert main(["ablate", "--config", cfg]) == 2
    assert "depth ablation value" in capsys.readouterr().err


def test_non_finite_loss_exit(tmp_path, monkeypatch, capsys):
    import voplab.trainer as tr
    from voplab import tensor as T
    cfg = write_config(tmp_path)
    main(["generate", "--config", cfg])
    monkeypatch.setattr(tr, "contrastive_loss", lambda S, scale: T.sum_(S) * float("nan"))
    assert main(["train", "--config", cfg]) == 4
    assert "step 0" in capsys.readouterr().err


def test_seed_override(tmp_path):
    cfg = write_config(tmp_path)
    main(["generate", "--config", cfg, "--seed", "9"])
    m = json.loads((tmp_path / "run" / "data" / "manifest.json").read_text())
    assert m["config"]["seed"] == 9


def test_console_script(tmp_path):
    r = subprocess.run([sys.executable, "-m", "voplab.cli", "count-params", "--protocols", "vop"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("# schema: voplab-ledger/1")
    r = subprocess.run([sys.executable, "-m", "voplab.cli", "count-params", "--protocols", "nope"],
                       capture_output=True, text=True)
    assert r.returncode == 2


def test_missing_backbone_is_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path, backbone=str(tmp_path / "nope.zip"))
    main(["generate", "--config", cfg])
    assert main(["train", "--config", cfg]) == 2
    assert "not found" in capsys.readouterr().err
