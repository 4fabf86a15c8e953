use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use colxm::cli::write_embeddings;
use colxm::encoder::{ModularEncoderParams, ParamGroup};
use colxm::scoring::{LanguageId, TermEmbeddingMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const TOPICS: [&str; 4] = ["river", "engine", "garden", "market"];

fn words(lang: &str, topic: &str) -> Vec<String> {
    (0..6).map(|i| format!("{lang}{topic}{i}")).collect()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut corpus = String::new();
        let mut queries = String::new();
        let mut triples = String::new();
        let mut qrels = String::new();
        for lang in ["en", "de"] {
            for p in 0..12 {
                let topic = TOPICS[p % TOPICS.len()];
                let w = words(lang, topic);
                let text: Vec<&str> = (0..10).map(|_| w[rng.gen_range(0..w.len())].as_str()).collect();
                corpus += &format!(
                    "{{\"id\":\"{lang}-p{p}\",\"language\":\"{lang}\",\"text\":\"{}\"}}\n",
                    text.join(" ")
                );
            }
            for (q, topic) in TOPICS.iter().enumerate() {
                let w = words(lang, topic);
                queries += &format!(
                    "{{\"id\":\"{lang}-q{q}\",\"language\":\"{lang}\",\"text\":\"{} {}\"}}\n",
                    w[0], w[1]
                );
                qrels += &format!("{lang}-q{q} 0 {lang}-p{q} 1\n");
                if lang == "en" {
                    triples += &format!("{lang}-q{q} {lang}-p{q} {lang}-p{}\n", (q + 1) % 4);
                }
            }
        }
        f.write("corpus.jsonl", &corpus);
        f.write("queries.jsonl", &queries);
        f.write("triples.tsv", &triples);
        f.write("qrels.txt", &qrels);
        f.write("fr.jsonl", "{\"id\":\"fr-p0\",\"language\":\"fr\",\"text\":\"la riviere coule\"}\n{\"id\":\"fr-p1\",\"language\":\"fr\",\"text\":\"le moteur tourne\"}\n");
        f.write_config("config.toml", 5);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn write_config(&self, name: &str, finetune_steps: usize) -> PathBuf {
        self.write(
            name,
            &format!(
                "n = 8\nm = 16\nd_out = 16\nvocab_size = 256\nhidden_dim = 16\nbottleneck_dim = 4\n\
                 pretrain_steps = 20\nfinetune_steps = {finetune_steps}\nextend_steps = 10\nbatch_size = 2\n\
                 candidate_k = 100\nlr = 0.005\n"
            ),
        )
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_colxm"))
            .current_dir(self.dir.path())
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn fails(&self, args: &[&str], code: &str) -> String {
        let out = self.run(args);
        assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
        let err = String::from_utf8(out.stderr).unwrap();
        let line = err
            .lines()
            .find(|l| l.starts_with("error["))
            .unwrap_or_else(|| panic!("no error line in {err:?}"));
        assert!(line.starts_with(&format!("error[{code}]: ")), "{line}");
        assert_eq!(err.lines().filter(|l| l.starts_with("error[")).count(), 1);
        line.to_string()
    }

    fn train(&self, out: &str, seed: &str) {
        self.ok(&[
            "train", "--config", "config.toml", "--corpus", "corpus.jsonl", "--queries",
            "queries.jsonl", "--triples", "triples.tsv", "--seed", seed, "--out", out,
        ]);
    }
}

fn dir_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn parse_run(text: &str) -> BTreeMap<String, Vec<(String, usize)>> {
    let mut out: BTreeMap<String, Vec<(String, usize)>> = BTreeMap::new();
    for line in text.lines() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cols.len(), 6, "{line}");
        out.entry(cols[0].into())
            .or_default()
            .push((cols[2].into(), cols[3].parse().unwrap()));
    }
    out
}

#[test]
fn full_pipeline_is_byte_reproducible() {
    let f = Fixture::new();
    f.train("a.ckpt", "3");
    f.train("b.ckpt", "3");
    assert_eq!(fs::read(f.path("a.ckpt")).unwrap(), fs::read(f.path("b.ckpt")).unwrap());
    f.train("c.ckpt", "4");
    assert_ne!(fs::read(f.path("a.ckpt")).unwrap(), fs::read(f.path("c.ckpt")).unwrap());

    let mut summaries = Vec::new();
    for dir in ["ia", "ib"] {
        summaries.push(f.ok(&[
            "index", "--config", "config.toml", "--corpus", "corpus.jsonl", "--checkpoint",
            "a.ckpt", "--out", dir,
        ]));
    }
    assert_eq!(summaries[0], summaries[1]);
    assert_eq!(dir_files(&f.path("ia")), dir_files(&f.path("ib")));

    for (dir, run) in [("ia", "ra.txt"), ("ib", "rb.txt")] {
        f.ok(&[
            "search", "--config", "config.toml", "--index", dir, "--queries", "queries.jsonl",
            "--checkpoint", "a.ckpt", "--out", run,
        ]);
    }
    let run = fs::read_to_string(f.path("ra.txt")).unwrap();
    assert_eq!(run, fs::read_to_string(f.path("rb.txt")).unwrap());
    assert_eq!(parse_run(&run).len(), 8);

    let report = f.ok(&["eval", "--run", "ra.txt", "--qrels", "qrels.txt", "--metrics", "mrr@10, r@5"]);
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("mrr@10\t"));
    assert!(lines[1].starts_with("recall@5\t"));
    assert!(lines[0].contains("evaluated=8"));
}

#[test]
fn zero_finetune_steps_leave_the_pretrained_model() {
    let f = Fixture::new();
    f.write_config("zero.toml", 0);
    f.ok(&[
        "train", "--config", "zero.toml", "--corpus", "corpus.jsonl", "--queries", "queries.jsonl",
        "--triples", "triples.tsv", "--out", "with.ckpt", "--report", "loss.csv",
    ]);
    f.ok(&["train", "--config", "zero.toml", "--corpus", "corpus.jsonl", "--stage", "pretrain", "--out", "pre.ckpt"]);
    assert_eq!(fs::read(f.path("with.ckpt")).unwrap(), fs::read(f.path("pre.ckpt")).unwrap());

    let csv = fs::read_to_string(f.path("loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("stage,step,loss"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| r.starts_with("pretrain,")));
}

#[test]
fn staged_training_and_extension() {
    let f = Fixture::new();
    f.write_config("ft.toml", 6);
    f.ok(&["train", "--config", "ft.toml", "--corpus", "corpus.jsonl", "--stage", "pretrain", "--out", "pre.ckpt"]);
    f.ok(&[
        "train", "--config", "ft.toml", "--stage", "finetune", "--init", "pre.ckpt", "--corpus",
        "corpus.jsonl", "--queries", "queries.jsonl", "--triples", "triples.tsv", "--out", "ft.ckpt",
        "--report", "ft.csv",
    ]);
    let csv = fs::read_to_string(f.path("ft.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("finetune,")).count(), 6);

    let pre = ModularEncoderParams::load(&f.path("pre.ckpt")).unwrap();
    let ft = ModularEncoderParams::load(&f.path("ft.ckpt")).unwrap();
    let en = ParamGroup::Adapter(LanguageId::from("en"));
    assert_eq!(pre.group_bytes(&en), ft.group_bytes(&en));
    assert_eq!(pre.group_bytes(&ParamGroup::Embedding), ft.group_bytes(&ParamGroup::Embedding));
    assert_ne!(pre.group_bytes(&ParamGroup::Shared), ft.group_bytes(&ParamGroup::Shared));

    f.ok(&[
        "train", "--config", "ft.toml", "--stage", "extend", "--init", "ft.ckpt", "--lang", "fr",
        "--corpus", "fr.jsonl", "--out", "fr.ckpt",
    ]);
    let fr = ModularEncoderParams::load(&f.path("fr.ckpt")).unwrap();
    assert!(fr.has_language(&LanguageId::from("fr")));
    for g in [ParamGroup::Shared, ParamGroup::Output, ParamGroup::Embedding, en] {
        assert_eq!(ft.group_bytes(&g), fr.group_bytes(&g));
    }

    let err = f.fails(
        &[
            "train", "--config", "ft.toml", "--stage", "extend", "--init", "ft.ckpt", "--lang", "it",
            "--corpus", "fr.jsonl", "--out", "it.ckpt",
        ],
        "E_LANG",
    );
    assert!(err.contains("`it`"));
    f.fails(
        &["train", "--config", "ft.toml", "--stage", "finetune", "--corpus", "corpus.jsonl", "--out", "x.ckpt"],
        "E_CONFIG",
    );
    f.fails(
        &["train", "--config", "ft.toml", "--corpus", "corpus.jsonl", "--lang", "xx", "--out", "x.ckpt"],
        "E_LANG",
    );
}

#[test]
fn triple_errors_name_the_problem() {
    let f = Fixture::new();
    f.write("bad_id.tsv", "en-q0 en-p0 en-p1\nen-q1 en-p404 en-p1\n");
    let line = f.fails(
        &[
            "train", "--config", "config.toml", "--corpus", "corpus.jsonl", "--queries", "queries.jsonl",
            "--triples", "bad_id.tsv", "--out", "x.ckpt",
        ],
        "E_UNKNOWN_ID",
    );
    assert!(line.contains("en-p404"), "{line}");

    f.write("bad_line.tsv", "en-q0 en-p0 en-p1\nen-q1 en-p1\n");
    let line = f.fails(
        &[
            "train", "--config", "config.toml", "--corpus", "corpus.jsonl", "--queries", "queries.jsonl",
            "--triples", "bad_line.tsv", "--out", "x.ckpt",
        ],
        "E_PARSE",
    );
    assert!(line.contains("bad_line.tsv:2:"), "{line}");
    assert!(!f.path("x.ckpt").exists());
}

fn random_items(seed: u64, count: usize, dim: usize, prefix: &str) -> BTreeMap<String, TermEmbeddingMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let rows: Vec<Vec<f64>> = (0..rng.gen_range(1..5))
                .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0) as f64).collect())
                .collect();
            (format!("{prefix}{i:03}"), TermEmbeddingMatrix::from_rows(&rows).unwrap())
        })
        .collect()
}

fn jsonl(items: &BTreeMap<String, TermEmbeddingMatrix>) -> String {
    items
        .iter()
        .map(|(id, m)| {
            let rows: Vec<Vec<f64>> = m.iter_rows().map(<[f64]>::to_vec).collect();
            format!(
                "{{\"id\":\"{id}\",\"language\":\"xx\",\"embeddings\":{}}}\n",
                serde_json::to_string(&rows).unwrap()
            )
        })
        .collect()
}

#[test]
fn precomputed_embeddings_search_and_exact_mode() {
    let f = Fixture::new();
    let dim = 6;
    let passages = random_items(1, 40, dim, "doc");
    write_embeddings(&f.path("emb.bin"), dim, &passages).unwrap();
    f.write("q.jsonl", &jsonl(&random_items(2, 5, dim, "q")));

    let summary = f.ok(&["index", "--embeddings", "emb.bin", "--out", "idx"]);
    let total: usize = passages.values().map(|m| m.rows()).sum();
    assert!(summary.contains(&format!("embeddings: {total}")), "{summary}");
    let centroids: usize = summary
        .lines()
        .find_map(|l| l.strip_prefix("centroids: "))
        .unwrap()
        .parse()
        .unwrap();
    let id_bits = centroids.trailing_zeros() as usize;
    assert!(summary.contains(&format!("bits/vector: {}", 2 * dim + id_bits)), "{summary}");

    let nprobe = centroids.to_string();
    for (mode, out) in [(None, "approx.txt"), (Some("--exact"), "exact.txt")] {
        let mut args = vec!["search", "--index", "idx", "--queries", "q.jsonl", "--k", "500", "--nprobe", &nprobe, "--out", out];
        args.extend(mode);
        f.ok(&args);
    }
    let approx = parse_run(&fs::read_to_string(f.path("approx.txt")).unwrap());
    let exact = parse_run(&fs::read_to_string(f.path("exact.txt")).unwrap());
    assert_eq!(approx.len(), 5);
    for (qid, ranking) in &exact {
        assert_eq!(ranking.len(), 40, "k beyond the corpus returns every passage");
        let ranks: Vec<usize> = ranking.iter().map(|r| r.1).collect();
        assert_eq!(ranks, (1..=40).collect::<Vec<_>>());
        assert_eq!(&approx[qid], ranking, "full probe agrees with exhaustive search");
    }

    f.write("q3.jsonl", &jsonl(&random_items(3, 2, 3, "q")));
    let line = f.fails(&["search", "--index", "idx", "--queries", "q3.jsonl", "--out", "r.txt"], "E_DIM");
    assert!(line.contains('6') && line.contains('3'), "{line}");
}

#[test]
fn usage_and_metric_errors() {
    let f = Fixture::new();
    let out = f.run(&["search", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error[E_USAGE]: "), "{err}");
    assert_eq!(err.lines().count(), 1);

    f.write("run.txt", "q1 Q0 d1 1 2.5 t\n");
    let line = f.fails(&["eval", "--run", "run.txt", "--qrels", "qrels.txt", "--metrics", "ndcg@10"], "E_METRIC");
    assert!(line.contains("mrr@K") && line.contains("recall@K"), "{line}");

    f.write("broken.toml", "seed = \"x\"\n");
    f.fails(&["--config", "broken.toml", "eval", "--run", "run.txt", "--qrels", "qrels.txt"], "E_PARSE");
    f.fails(&["index", "--embeddings", "missing.bin", "--out", "idx"], "E_IO");
}
