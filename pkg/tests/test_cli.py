import numpy as np
import pytest

from needlenet.cli import (
    EXIT_BAD_DATA,
    EXIT_CHECKPOINT,
    EXIT_MISSING_FILE,
    EXIT_OK,
    EXIT_USAGE,
    dispatch,
)
from needlenet.models import (
    LightCnnSpec,
    build_light_cnn,
    load_checkpoint,
    save_checkpoint,
)


def run(capsys, *argv):
    code = dispatch([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_params_prints_exact_counts(capsys):
    code, out, _ = run(capsys, "params", "--arch", "16-32-32")
    assert code == EXIT_OK
    assert out.strip() == "33155"
    code, out, _ = run(capsys, "params", "--arch", "8-16-32")
    assert out.strip() == "24851"
    code, out, _ = run(capsys, "params", "--arch", "crnn")
    assert out.strip() == "223491"


def test_params_rejects_bad_arch(capsys):
    code, _, err = run(capsys, "params", "--arch", "16")
    assert code == EXIT_USAGE
    assert err.startswith("error: bad-flag:")


def test_unknown_command_is_usage_error(capsys):
    assert run(capsys, "frobnicate")[0] == EXIT_USAGE


def test_gen_data_prints_seed_when_omitted(capsys, tmp_path):
    code, out, _ = run(
        capsys, "gen-data", "--out", tmp_path / "d", "--preset", "desk",
        "--clips-per-section", "3", "--config", _mini_gen_config(tmp_path),
    )
    assert code == EXIT_OK
    assert out.startswith("seed ")
    seed = int(out.splitlines()[0].split()[1])
    assert 0 <= seed < 2**31
    assert "wrote 27 clips" in out


def _mini_gen_config(tmp_path):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text(
        "width = 160\nheight = 120\n"
        "no_needle_frames = 3 4\nfist_frames = 3 4\ninfil_frames = 3 4\n"
        "# comments and blank lines are ignored\n\n"
    )
    return cfg


@pytest.fixture(scope="module")
def cli_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "corpus"
    code = dispatch([
        "gen-data", "--out", str(root), "--preset", "desk", "--seed", "11",
        "--clips-per-section", "3",
        "--config", str(_mini_gen_config(root.parent)),
    ])
    assert code == EXIT_OK
    return root


def test_gen_data_deterministic_under_seed(capsys, tmp_path, cli_corpus):
    other = tmp_path / "again"
    code, _, _ = run(
        capsys, "gen-data", "--out", other, "--preset", "desk", "--seed", "11",
        "--clips-per-section", "3", "--config", _mini_gen_config(tmp_path),
    )
    assert code == EXIT_OK
    manifest_a = (cli_corpus / "manifest.csv").read_bytes()
    assert (other / "manifest.csv").read_bytes() == manifest_a


def test_gen_data_rejects_unknown_config_key(capsys, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("wibble = 3\n")
    code, _, err = run(capsys, "gen-data", "--out", tmp_path / "x", "--config", cfg)
    assert code == EXIT_BAD_DATA
    assert "wibble" in err


def test_config_file_must_exist(capsys, tmp_path):
    code, _, err = run(capsys, "params", "--arch", "2-4", "--config", tmp_path / "no.cfg")
    assert code == EXIT_MISSING_FILE
    assert err.startswith("error: missing-file:")


def test_config_rejects_garbage_lines(capsys, tmp_path):
    cfg = tmp_path / "garbage.cfg"
    cfg.write_text("this is not a key value pair\n")
    code, _, err = run(capsys, "params", "--arch", "2-4", "--config", cfg)
    assert code == EXIT_BAD_DATA


@pytest.fixture(scope="module")
def cli_cnn_checkpoint(cli_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt") / "cnn.nsnet"
    code = dispatch([
        "train-cnn", "--data", str(cli_corpus), "--arch", "2-4",
        "--out", str(out), "--epochs", "1", "--seed", "0",
    ])
    assert code == EXIT_OK
    return out


def test_train_cnn_writes_checkpoint_and_history(cli_cnn_checkpoint):
    assert cli_cnn_checkpoint.is_file()
    hist = cli_cnn_checkpoint.with_suffix(".history.csv")
    assert hist.is_file()
    lines = hist.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_acc"
    assert len(lines) == 2  # one epoch
    ckpt = load_checkpoint(cli_cnn_checkpoint)
    assert ckpt.kind == "cnn" and ckpt.arch == "2-4"


def test_train_cnn_missing_dataset(capsys, tmp_path):
    code, _, err = run(
        capsys, "train-cnn", "--data", tmp_path / "nope", "--arch", "2-4",
        "--out", tmp_path / "o.nsnet",
    )
    assert code == EXIT_MISSING_FILE


def test_train_cnn_flag_overrides_config(capsys, cli_corpus, tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("epochs = 5\nseed = 0\n")
    out = tmp_path / "flag.nsnet"
    code, _, _ = run(
        capsys, "train-cnn", "--data", cli_corpus, "--arch", "2-4",
        "--out", out, "--config", cfg, "--epochs", "1",
    )
    assert code == EXIT_OK
    assert len(out.with_suffix(".history.csv").read_text().splitlines()) == 2


def test_eval_runs_and_writes_csv(capsys, cli_corpus, cli_cnn_checkpoint, tmp_path):
    outdir = tmp_path / "eval"
    code, out, _ = run(
        capsys, "eval", "--checkpoint", cli_cnn_checkpoint, "--data", cli_corpus,
        "--split", "test", "--out", outdir,
    )
    assert code == EXIT_OK
    assert "frame_accuracy" in out
    assert "NoNeedle" in out  # confusion grid
    assert (outdir / "cnn_per_clip.csv").is_file()
    assert (outdir / "cnn_groups.csv").is_file()
    assert (outdir / "cnn_confusion.csv").is_file()


def test_eval_rejects_corrupt_checkpoint(capsys, cli_corpus, tmp_path):
    bad = tmp_path / "bad.nsnet"
    bad.write_bytes(b"not a checkpoint at all")
    code, _, err = run(
        capsys, "eval", "--checkpoint", bad, "--data", cli_corpus,
        "--out", tmp_path / "e",
    )
    assert code == EXIT_CHECKPOINT
    assert err.startswith("error: checkpoint:")


def test_eval_rejects_missing_checkpoint(capsys, cli_corpus, tmp_path):
    code, _, _ = run(
        capsys, "eval", "--checkpoint", tmp_path / "ghost.nsnet",
        "--data", cli_corpus, "--out", tmp_path / "e",
    )
    assert code == EXIT_MISSING_FILE


@pytest.fixture(scope="module")
def cli_crnn_checkpoint(cli_corpus, tmp_path_factory):
    base = tmp_path_factory.mktemp("base") / "base.nsnet"
    save_checkpoint(build_light_cnn(LightCnnSpec((16, 32, 32)), seed=0), base)
    out = base.parent / "crnn.nsnet"
    code = dispatch([
        "train-crnn", "--data", str(cli_corpus), "--base-checkpoint", str(base),
        "--timesteps", "4", "--out", str(out), "--epochs", "1", "--seed", "0",
    ])
    assert code == EXIT_OK
    return out


def test_train_crnn_rejects_wrong_base(capsys, cli_corpus, cli_cnn_checkpoint, tmp_path):
    code, _, err = run(
        capsys, "train-crnn", "--data", cli_corpus,
        "--base-checkpoint", cli_cnn_checkpoint, "--out", tmp_path / "c.nsnet",
        "--epochs", "1", "--seed", "0",
    )
    assert code == EXIT_CHECKPOINT


def test_stream_replay_outputs_records(capsys, cli_corpus, cli_crnn_checkpoint, tmp_path):
    ckpt = load_checkpoint(cli_crnn_checkpoint)
    assert ckpt.kind == "crnn"
    report_csv = tmp_path / "session.csv"
    code, out, _ = run(
        capsys, "stream", "--checkpoint", cli_crnn_checkpoint, "--data", cli_corpus,
        "--split", "test", "--fps", "0", "--out", report_csv,
    )
    assert code == EXIT_OK
    records = [l for l in out.splitlines() if l and not l.startswith("#")]
    assert records
    first = records[0].split(",")
    assert len(first) == 6
    assert first[1] in ("NoNeedle", "Fist", "Infil")
    lines = report_csv.read_text().splitlines()
    assert lines[0].startswith("source,frames,accuracy")
    assert len(lines) > 1


def test_stream_single_clip_filter(capsys, cli_corpus, cli_crnn_checkpoint):
    code, _, err = run(
        capsys, "stream", "--checkpoint", cli_crnn_checkpoint, "--data", cli_corpus,
        "--split", "test", "--clip", "does-not-exist", "--fps", "0",
    )
    assert code == EXIT_BAD_DATA


def test_stream_raw_pipe(capsys, cli_crnn_checkpoint, tmp_path):
    from needlenet.stream import write_raw_frame

    raw = tmp_path / "frames.raw"
    rng = np.random.default_rng(0)
    with open(raw, "wb") as fh:
        for i in range(3):
            write_raw_frame(fh, i, rng.integers(0, 256, size=(60, 80, 3), dtype=np.uint8))
    code, out, _ = run(
        capsys, "stream", "--checkpoint", cli_crnn_checkpoint, "--raw", raw,
    )
    assert code == EXIT_OK
    records = [l for l in out.splitlines() if "," in l]
    assert len(records) == 3
    assert records[0].split(",")[0] == "0"


def test_stream_requires_crnn(capsys, cli_cnn_checkpoint, cli_corpus):
    code, _, err = run(
        capsys, "stream", "--checkpoint", cli_cnn_checkpoint, "--data", cli_corpus,
    )
    assert code == EXIT_CHECKPOINT


def test_report_writes_figures(capsys, cli_corpus, cli_cnn_checkpoint,
                               cli_crnn_checkpoint, tmp_path):
    outdir = tmp_path / "report"
    history = cli_cnn_checkpoint.with_suffix(".history.csv")
    code, out, _ = run(
        capsys, "report", "--checkpoint", cli_cnn_checkpoint,
        "--crnn-checkpoint", cli_crnn_checkpoint, "--data", cli_corpus,
        "--split", "test", "--history", history, "--out", outdir,
    )
    assert code == EXIT_OK
    assert (outdir / "cnn_per_clip.csv").is_file()
    assert (outdir / "crnn_per_clip.csv").is_file()
    assert (outdir / "cnn_confusion.png").is_file()
    assert (outdir / "crnn_confusion.png").is_file()
    assert (outdir / "history.png").is_file()
    timelines = list(outdir.glob("timeline_*.png"))
    assert timelines and timelines[0].stat().st_size > 0


def test_sweep_writes_csv_and_selects(capsys, cli_corpus, tmp_path):
    base = tmp_path / "base.nsnet"
    save_checkpoint(build_light_cnn(LightCnnSpec((16, 32, 32)), seed=0), base)
    out = tmp_path / "sweep.csv"
    code, text, _ = run(
        capsys, "sweep-timesteps", "--data", cli_corpus, "--base-checkpoint", base,
        "--timesteps", "3,5", "--out", out, "--epochs", "1", "--seed", "0",
    )
    assert code == EXIT_OK
    assert "selected T=" in text
    lines = out.read_text().splitlines()
    assert lines[0] == "time_steps,val_acc"
    assert len(lines) == 3


def test_sweep_rejects_bad_timestep_list(capsys, cli_corpus, tmp_path):
    base = tmp_path / "base.nsnet"
    save_checkpoint(build_light_cnn(LightCnnSpec((16, 32, 32)), seed=0), base)
    code, _, _ = run(
        capsys, "sweep-timesteps", "--data", cli_corpus, "--base-checkpoint", base,
        "--timesteps", "abc", "--out", tmp_path / "s.csv",
    )
    assert code == EXIT_USAGE
