import shutil
import subprocess

import pytest

import cli_pipeline
from marvel.cli import COMMANDS, blob_hash, run


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    w = tmp_path_factory.mktemp("cli")
    codes = cli_pipeline.run_all(w)
    return w, codes


def test_every_command_succeeds(workdir):
    _, codes = workdir
    assert codes == {name: 0 for name in codes}
    covered = {argv[0] for _, argv, _ in cli_pipeline.steps(workdir[0])}
    assert covered == set(COMMANDS)


def test_eval_prints_metric_block(workdir, capsys):
    w, _ = workdir
    assert run(["eval", "--run", str(w / "run.txt"), "--qrels", str(w / "data/qrels.txt")]) == 0
    out = capsys.readouterr().out
    assert "MRR@10" in out and "NDCG@10" in out and "Recall@100" in out
    text = (w / "eval.txt").read_text()
    assert "permutation test p-values" in text


def test_eval_tsv(workdir, capsys):
    w, _ = workdir
    assert run(["eval", "--run", str(w / "run.txt"), "--qrels", str(w / "data/qrels.txt"), "--format", "tsv"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [line.split("\t")[1] for line in lines] == ["MRR@10", "NDCG@10", "Recall@100"]


def test_reports_have_expected_shape(workdir):
    w, _ = workdir
    assert "w/o caption" in (w / "ablate.txt").read_text()
    assert "mean" in (w / "ablate.txt").read_text()
    assert "knn5_mean" in (w / "replace.txt").read_text()
    assert "feature mass" in (w / "attn.txt").read_text()
    assert (w / "verbal.txt").read_text().count("==") == 6


def test_help_and_usage_errors(capsys):
    assert run(["--help"]) == 0
    assert run([]) == 1
    assert run(["eval", "--run", "r.txt", "--qrels", "q.txt", "--bogus"]) == 1
    err = capsys.readouterr().err
    assert "--bogus" in err and "--run" in err
    assert run(["nonsense"]) == 1


def test_finetune_needs_checkpoint(workdir, capsys):
    w, _ = workdir
    assert run(["finetune", "--data", str(w / "data"), "--out", str(w / "x.ckpt")]) == 1
    assert "--checkpoint" in capsys.readouterr().err
    assert run(["finetune", "--data", str(w / "data"), "--stage", "ance", "--no-clip-pretrain",
                "--out", str(w / "x.ckpt")]) == 1


def test_data_errors_exit_2(workdir, tmp_path):
    w, _ = workdir
    assert run(["eval", "--run", str(tmp_path / "missing.txt"), "--qrels", str(w / "data/qrels.txt")]) == 2
    bad = tmp_path / "bad_run.txt"
    bad.write_text("q1 Q0 d1 2 0.5 t\n")
    assert run(["eval", "--run", str(bad), "--qrels", str(w / "data/qrels.txt")]) == 2
    cfg = tmp_path / "bad.conf"
    cfg.write_text("tau = 0\n")
    assert run(["pretrain", "--data", str(w / "data"), "--config", str(cfg), "--out", str(tmp_path / "p")]) == 2


def test_numeric_failure_exit_3(tmp_path):
    emb = tmp_path / "e.tsv"
    emb.write_text("d1\t0 0\nd2\t1 0\n")
    assert run(["index", "--embeddings", str(emb), "--out", str(tmp_path / "i.tsv")]) == 3


def test_blob_hash_matches_git(tmp_path):
    f = tmp_path / "x.txt"
    f.write_bytes(b"some bytes\n\x00\x01")
    git = shutil.which("git")
    if git is None:
        pytest.skip("git not installed")
    want = subprocess.run([git, "hash-object", str(f)], capture_output=True, text=True, check=True).stdout.strip()
    assert blob_hash(f) == want


def test_paper_faithful_flag_sets_training_values(workdir, capsys):
    w, _ = workdir
    code = run(["finetune", "--data", str(w / "data"), "--checkpoint", str(w / "pre.ckpt"), "--paper-faithful",
                "--max-steps", "1", "--out", str(w / "pf.ckpt"), "--log-level", "INFO"])
    assert code == 0
    text = capsys.readouterr().err
    for line in ("batch_size = 64", "lr = 5e-06", "tau = 0.01", "hard_neg_top_k = 100", "eval_every = 500",
                 "early_stop = 5"):
        assert line in text
