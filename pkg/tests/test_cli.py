"""End-to-end tests for the command-line pipeline.

Each test drives main(argv) in-process against files in tmp_path, then
inspects exit codes and the files written under the output directory.
"""

import math
import sys
import subprocess

import pytest

from progemb import dataio
from progemb.cli import main
from progemb.encoder import MaeDecoder, Tokenizer, ToyEncoder, save_checkpoint
from progemb.mining import Passage


def write_cfg(path, **options):
    lines = [f"{key} = {value}" for key, value in options.items()]
    path.write_text("\n".join(lines) + "\n")
    return str(path)


DOC_WORDS = [
    ["alpha", "beta", "gamma"],
    ["delta", "epsilon", "zeta"],
    ["eta", "theta", "iota"],
    ["kappa", "lam", "mu"],
    ["nu", "xi", "omicron"],
    ["pi", "rho", "sigma"],
]


def corpus_passages(n=6):
    return [
        Passage(f"d{i}", " ".join(DOC_WORDS[i % 6]) + f" common{i % 3}", "src")
        for i in range(n)
    ]


def make_checkpoint(path, texts, dim=8, seed=0, with_decoder=False):
    tok = Tokenizer.from_texts(texts)
    enc = ToyEncoder.create(len(tok.id_to_token), dim, seed=seed)
    dec = None
    if with_decoder:
        dec = MaeDecoder.create(64, dim, len(tok.id_to_token), seed=seed)
    save_checkpoint(path, enc, tok, dec)
    return tok


class TestArgumentParsing:
    def test_missing_subcommand_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_missing_config_flag_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["pretrain"])
        assert exc.value.code == 2

    def test_unknown_loss_mode_flag_rejected(self, tmp_path):
        cfg = write_cfg(tmp_path / "run.cfg")
        with pytest.raises(SystemExit):
            main(["finetune", "--config", cfg, "--loss-mode", "triplet"])

    def test_module_entry_point(self, tmp_path):
        out = subprocess.run(
            [sys.executable, "-m", "progemb", "--help"],
            capture_output=True,
            text=True,
        )
        assert out.returncode == 0
        assert "pretrain" in out.stdout


class TestExitCodes:
    def test_missing_config_file_is_io_error(self, tmp_path, capsys):
        rc = main(["pretrain", "--config", str(tmp_path / "absent.cfg")])
        assert rc == 2
        assert "absent.cfg" in capsys.readouterr().err

    def test_invalid_config_is_validation_error(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "run.cfg", mining_k=0)
        rc = main(["mine", "--config", cfg])
        assert rc == 1
        assert "mining_k" in capsys.readouterr().err

    def test_missing_corpus_file_is_io_error(self, tmp_path, capsys):
        cfg = write_cfg(
            tmp_path / "run.cfg",
            corpus_path=str(tmp_path / "gone.jsonl"),
            out_dir=str(tmp_path / "out"),
        )
        rc = main(["pretrain", "--config", cfg])
        assert rc == 2
        assert "gone.jsonl" in capsys.readouterr().err

    def test_missing_required_path_is_validation_error(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "run.cfg", out_dir=str(tmp_path / "out"))
        rc = main(["pretrain", "--config", cfg])
        assert rc == 1
        assert "corpus_path" in capsys.readouterr().err

    def test_failure_happens_before_outputs_are_written(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_cfg(tmp_path / "run.cfg", mining_k=0, out_dir=str(out))
        assert main(["mine", "--config", cfg]) == 1
        assert not out.exists()


class TestPretrain:
    def run(self, tmp_path, *extra, epochs=2, name="run.cfg", out="out"):
        corpus = tmp_path / "corpus.jsonl"
        if not corpus.exists():
            dataio.write_corpus(corpus, corpus_passages())
        cfg = write_cfg(
            tmp_path / name,
            corpus_path=str(corpus),
            out_dir=str(tmp_path / out),
            embed_dim=8,
            max_passage_len=16,
            pretrain_epochs=epochs,
            pretrain_batch_size=4,
            optimizer="sgd",
        )
        return main(["pretrain", "--config", cfg, *extra]), tmp_path / out

    def test_writes_checkpoint_and_curve(self, tmp_path, capsys):
        rc, out = self.run(tmp_path, epochs=3)
        assert rc == 0
        assert (out / "checkpoint.bin").exists()
        curve = dataio.read_loss_curve(out / "loss_curve.jsonl")
        assert len(curve) == 3
        assert all(math.isfinite(v) for v in curve)
        assert "wrote" in capsys.readouterr().out

    def test_same_seed_reproduces_bytes(self, tmp_path):
        rc1, out1 = self.run(tmp_path, out="out1")
        rc2, out2 = self.run(tmp_path, out="out2")
        assert rc1 == rc2 == 0
        assert (out1 / "checkpoint.bin").read_bytes() == (
            out2 / "checkpoint.bin"
        ).read_bytes()
        assert (out1 / "loss_curve.jsonl").read_bytes() == (
            out2 / "loss_curve.jsonl"
        ).read_bytes()

    def test_seed_override_changes_result(self, tmp_path):
        _, out1 = self.run(tmp_path, out="out1")
        _, out2 = self.run(tmp_path, "--seed", "9", out="out2")
        assert (out1 / "checkpoint.bin").read_bytes() != (
            out2 / "checkpoint.bin"
        ).read_bytes()

    def test_out_flag_overrides_config(self, tmp_path):
        rc, _ = self.run(tmp_path, "--out", str(tmp_path / "elsewhere"))
        assert rc == 0
        assert (tmp_path / "elsewhere" / "checkpoint.bin").exists()


class TestMine:
    def setup_inputs(self, tmp_path, n_docs=20, **overrides):
        passages = corpus_passages(n_docs)
        corpus = tmp_path / "corpus.jsonl"
        dataio.write_corpus(corpus, passages)
        ckpt = tmp_path / "ckpt.bin"
        make_checkpoint(ckpt, [p.text for p in passages])
        options = {
            "corpus_path": str(corpus),
            "checkpoint_path": str(ckpt),
            "out_dir": str(tmp_path / "out"),
            "embed_dim": 8,
            "max_passage_len": 16,
        }
        options.update(overrides)
        return write_cfg(tmp_path / "run.cfg", **options), tmp_path / "out"

    def test_one_example_per_passage_with_full_negatives(self, tmp_path):
        cfg, out = self.setup_inputs(tmp_path)
        assert main(["mine", "--config", cfg]) == 0
        rows = dataio.read_dataset(out / "dataset.jsonl")
        assert len(rows) == 20
        assert all(len(r.negative_ids) == 5 for r in rows)
        for row in rows:
            assert row.positive_id not in row.negative_ids
            assert row.query_id.startswith(row.positive_id)

    def test_passages_and_embeddings_align(self, tmp_path):
        cfg, out = self.setup_inputs(tmp_path)
        main(["mine", "--config", cfg])
        passages = dataio.read_corpus(out / "passages.jsonl")
        ids, embs = dataio.read_embeddings(out / "passage_embeddings.bin")
        assert [p.passage_id for p in passages] == ids
        assert embs.shape == (len(ids), 8)

    def test_always_relevant_judge_drops_everything(self, tmp_path):
        cfg, out = self.setup_inputs(tmp_path, judge="always_relevant")
        assert main(["mine", "--config", cfg]) == 0
        rows = dataio.read_dataset(out / "dataset.jsonl")
        assert len(rows) == 20
        assert all(r.negative_ids == () for r in rows)
        audit = dataio.read_mining_audit(out / "mining_audit.jsonl")
        assert len(audit) == 20 * 5
        assert all(r["reason"] == "judged_relevant" for r in audit)

    def test_irrelevant_judge_leaves_audit_empty(self, tmp_path):
        cfg, out = self.setup_inputs(tmp_path)
        main(["mine", "--config", cfg])
        assert dataio.read_mining_audit(out / "mining_audit.jsonl") == []

    def test_provenance_records_similarities(self, tmp_path):
        cfg, out = self.setup_inputs(tmp_path)
        main(["mine", "--config", cfg])
        rows = dataio.read_dataset(out / "dataset.jsonl")
        for row in rows:
            sims = row.provenance["similarities"]
            assert len(sims) == len(row.negative_ids)
            assert sims == sorted(sims, reverse=True)

    def test_long_doc_splits_into_multiple_passages(self, tmp_path):
        long_doc = Passage(
            "big", ("words here. " * 30).strip(), "src"
        )
        corpus = tmp_path / "corpus.jsonl"
        dataio.write_corpus(corpus, [long_doc])
        ckpt = tmp_path / "ckpt.bin"
        make_checkpoint(ckpt, [long_doc.text])
        cfg = write_cfg(
            tmp_path / "run.cfg",
            corpus_path=str(corpus),
            checkpoint_path=str(ckpt),
            out_dir=str(tmp_path / "out"),
            embed_dim=8,
            passage_max_chars=60,
        )
        assert main(["mine", "--config", cfg]) == 0
        passages = dataio.read_corpus(tmp_path / "out" / "passages.jsonl")
        assert len(passages) > 1
        assert all(p.passage_id.startswith("big-p") for p in passages)


def finetune_fixture(tmp_path, with_decoder=False, n_queries=4):
    passages = corpus_passages(6)
    texts = [p.text for p in passages]
    ckpt = tmp_path / "ckpt.bin"
    make_checkpoint(ckpt, texts, with_decoder=with_decoder)
    passages_path = tmp_path / "passages.jsonl"
    dataio.write_corpus(passages_path, passages)
    rows = []
    for i in range(n_queries):
        pos = passages[i]
        negs = [passages[(i + 1) % 6].passage_id, passages[(i + 2) % 6].passage_id]
        rows.append(
            {
                "query_id": f"q{i}",
                "query": pos.text.split()[0],
                "positive_id": pos.passage_id,
                "negative_ids": negs,
            }
        )
    dataset_path = tmp_path / "dataset.jsonl"
    dataio.write_dataset(dataset_path, rows)
    return ckpt, passages_path, dataset_path


class TestFinetune:
    def make_cfg(self, tmp_path, ckpt, passages_path, dataset_path, out="out", **extra):
        options = {
            "checkpoint_path": str(ckpt),
            "passages_path": str(passages_path),
            "dataset_path": str(dataset_path),
            "out_dir": str(tmp_path / out),
            "embed_dim": 8,
            "max_passage_len": 16,
            "finetune_epochs": 3,
            "finetune_batch_size": 2,
            "optimizer": "sgd",
        }
        options.update(extra)
        return write_cfg(tmp_path / f"{out}.cfg", **options), tmp_path / out

    def test_writes_checkpoint_and_audit(self, tmp_path):
        ckpt, ppath, dpath = finetune_fixture(tmp_path)
        cfg, out = self.make_cfg(tmp_path, ckpt, ppath, dpath)
        assert main(["finetune", "--config", cfg]) == 0
        mode, audit = dataio.read_finetune_audit(out / "finetune_audit.jsonl")
        assert mode == "progressive"
        # 4 examples, batch 2, 3 epochs; steps count from 0
        assert [a.step for a in audit] == list(range(6))
        assert [a.epoch for a in audit] == [0, 0, 1, 1, 2, 2]
        assert (out / "checkpoint.bin").exists()

    def test_audit_t_column_replays_momentum_recursion(self, tmp_path):
        ckpt, ppath, dpath = finetune_fixture(tmp_path)
        cfg, out = self.make_cfg(tmp_path, ckpt, ppath, dpath, alpha=0.5, beta=0.1)
        main(["finetune", "--config", cfg])
        _, audit = dataio.read_finetune_audit(out / "finetune_audit.jsonl")
        t = 0.0
        for row in audit:
            mean_pos = row.sigma + 0.1
            t = 0.5 * mean_pos + 0.5 * t
            assert abs(row.t - t) <= 1e-12

    def test_zero_epochs_round_trips_checkpoint_bytes(self, tmp_path):
        ckpt, ppath, dpath = finetune_fixture(tmp_path, with_decoder=True)
        cfg, out = self.make_cfg(tmp_path, ckpt, ppath, dpath, finetune_epochs=0)
        assert main(["finetune", "--config", cfg]) == 0
        assert (out / "checkpoint.bin").read_bytes() == ckpt.read_bytes()

    def test_loss_mode_flag_lands_in_audit_header(self, tmp_path):
        ckpt, ppath, dpath = finetune_fixture(tmp_path)
        cfg, out = self.make_cfg(tmp_path, ckpt, ppath, dpath)
        main(["finetune", "--config", cfg, "--loss-mode", "infonce"])
        mode, audit = dataio.read_finetune_audit(out / "finetune_audit.jsonl")
        assert mode == "infonce"
        assert all(a.mean_weight == 1.0 for a in audit)

    def test_deterministic_across_runs(self, tmp_path):
        ckpt, ppath, dpath = finetune_fixture(tmp_path)
        cfg1, out1 = self.make_cfg(tmp_path, ckpt, ppath, dpath, out="out1")
        cfg2, out2 = self.make_cfg(tmp_path, ckpt, ppath, dpath, out="out2")
        assert main(["finetune", "--config", cfg1]) == 0
        assert main(["finetune", "--config", cfg2]) == 0
        assert (out1 / "checkpoint.bin").read_bytes() == (
            out2 / "checkpoint.bin"
        ).read_bytes()
        assert (out1 / "finetune_audit.jsonl").read_bytes() == (
            out2 / "finetune_audit.jsonl"
        ).read_bytes()

    def test_unknown_negative_id_is_validation_error(self, tmp_path, capsys):
        ckpt, ppath, dpath = finetune_fixture(tmp_path)
        rows = [
            {
                "query_id": "q0",
                "query": "alpha",
                "positive_id": "d0",
                "negative_ids": ["ghost"],
            }
        ]
        dataio.write_dataset(dpath, rows)
        cfg, _ = self.make_cfg(tmp_path, ckpt, ppath, dpath)
        assert main(["finetune", "--config", cfg]) == 1
        assert "ghost" in capsys.readouterr().err


class TestEvaluate:
    def setup_inputs(self, tmp_path, **overrides):
        passages = corpus_passages(6)
        gallery = tmp_path / "gallery.jsonl"
        dataio.write_corpus(gallery, passages)
        ckpt = tmp_path / "ckpt.bin"
        make_checkpoint(ckpt, [p.text for p in passages])
        # each query is its positive passage verbatim, so it must rank first
        queries = [(f"q{i}", passages[i].text) for i in range(4)]
        queries.append(("q-oov", "wordthatnobodyhasseen"))
        queries.append(("q-unjudged", passages[4].text))
        qpath = tmp_path / "queries.jsonl"
        dataio.write_queries(qpath, queries)
        qrels = {f"q{i}": {f"d{i}": 1} for i in range(4)}
        qrels["q-oov"] = {"d0": 1}
        rpath = tmp_path / "qrels.jsonl"
        dataio.write_qrels(rpath, qrels)
        options = {
            "checkpoint_path": str(ckpt),
            "gallery_path": str(gallery),
            "queries_path": str(qpath),
            "qrels_path": str(rpath),
            "out_dir": str(tmp_path / "out"),
            "embed_dim": 8,
            "max_passage_len": 16,
        }
        options.update(overrides)
        return write_cfg(tmp_path / "run.cfg", **options), tmp_path / "out"

    def test_identity_queries_score_perfectly(self, tmp_path, capsys):
        cfg, out = self.setup_inputs(tmp_path)
        assert main(["evaluate", "--config", cfg]) == 0
        report = dataio.read_metrics_report(out / "metrics.jsonl")
        for i in range(4):
            assert report.per_query[f"q{i}"]["ndcg@10"] == pytest.approx(1.0, abs=1e-12)
            assert report.per_query[f"q{i}"]["recall@1"] == 1.0
        assert report.macro["mrr@10"] == pytest.approx(1.0, abs=1e-12)
        assert "ndcg@10" in capsys.readouterr().out

    def test_oov_query_lands_in_errors(self, tmp_path):
        cfg, out = self.setup_inputs(tmp_path)
        main(["evaluate", "--config", cfg])
        report = dataio.read_metrics_report(out / "metrics.jsonl")
        assert "q-oov" in report.errors
        assert "q-oov" not in report.per_query

    def test_unjudged_query_lands_in_exclusions(self, tmp_path):
        cfg, out = self.setup_inputs(tmp_path)
        main(["evaluate", "--config", cfg])
        report = dataio.read_metrics_report(out / "metrics.jsonl")
        assert "q-unjudged" in report.excluded


class TestBench:
    def make_cfg(self, tmp_path, **extra):
        options = {
            "out_dir": str(tmp_path / "out"),
            "embed_dim": 8,
            "bench_seeds": 1,
            "bench_clusters": 4,
            "bench_gallery": 40,
            "bench_train": 32,
            "bench_heldout": 8,
            "bench_epochs": 1,
            "finetune_batch_size": 16,
            "optimizer": "sgd",
        }
        options.update(extra)
        return write_cfg(tmp_path / "run.cfg", **options), tmp_path / "out"

    def test_single_seed_writes_two_runs_and_summary(self, tmp_path, capsys):
        cfg, out = self.make_cfg(tmp_path)
        assert main(["bench", "--config", cfg]) == 0
        runs, summary = dataio.read_bench_report(out / "bench.jsonl")
        assert [r["loss_mode"] for r in runs] == ["progressive", "infonce"]
        assert summary["seeds"] == 1
        for mode in ("progressive", "infonce"):
            row = next(r for r in runs if r["loss_mode"] == mode)
            assert summary[mode]["recall@1"] == pytest.approx(row["recall@1"])
        assert "delta" in summary
        assert "mean recall@1" in capsys.readouterr().out

    def test_two_seeds_average_into_summary(self, tmp_path):
        cfg, out = self.make_cfg(tmp_path, bench_seeds=2)
        assert main(["bench", "--config", cfg]) == 0
        runs, summary = dataio.read_bench_report(out / "bench.jsonl")
        assert len(runs) == 4
        assert sorted({r["seed"] for r in runs}) == [0, 1]
        for mode in ("progressive", "infonce"):
            values = [r["recall@1"] for r in runs if r["loss_mode"] == mode]
            assert summary[mode]["recall@1"] == pytest.approx(sum(values) / 2)
        assert summary["delta"]["recall@1"] == pytest.approx(
            summary["progressive"]["recall@1"] - summary["infonce"]["recall@1"]
        )
