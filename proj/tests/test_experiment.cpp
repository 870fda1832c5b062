#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "rflab/experiment.hpp"
#include "synthetic.hpp"
#include "testutil.hpp"

using namespace rflab;

namespace {

ExperimentConfig gprf_bm25_config(const std::filesystem::path& out) {
    auto cfg = synthetic::base_config(out);
    cfg.method = Method::Gprf;
    cfg.rewriter_kind = ClientKind::MockOracle;
    return cfg;
}

}  // namespace

TEST_CASE("incompatible method/retriever pairings fail before any work") {
    auto cfg = synthetic::base_config("unused");
    cfg.method = Method::Rm3;
    cfg.final_retriever = RetrieverKind::Dense;
    cfg.dense_store_path = "whatever.jsonl";
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = synthetic::base_config("unused");
    cfg.method = Method::Vprf;
    cfg.final_retriever = RetrieverKind::Bm25;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = synthetic::base_config("unused");
    cfg.fusion = FusionMode::DenseAggregate;
    cfg.final_retriever = RetrieverKind::Bm25;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = synthetic::base_config("unused");
    cfg.method = Method::GrfConcat;  // no prompt override configured
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = synthetic::base_config("unused");
    cfg.feedback_k = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = synthetic::base_config("unused");
    cfg.final_retriever = RetrieverKind::Dense;  // no dense store configured
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("method none is a pass-through of the final retriever") {
    testutil::TempDir tmp;
    testutil::LogCapture logs;
    auto cfg = synthetic::base_config(tmp.path() / "out");
    auto outcome = run_experiment(cfg);

    CHECK(std::filesystem::exists(outcome.run_path));
    CHECK(std::filesystem::exists(outcome.report_tsv_path));
    CHECK(std::filesystem::exists(outcome.report_json_path));
    CHECK(std::filesystem::exists(outcome.manifest_path));
    CHECK(outcome.runs.size() == 25);

    // The report must equal direct metric evaluation of the same run file.
    auto ctx_qrels = load_qrels(synthetic::qrels_path());
    auto lists = read_run(outcome.run_path.string());
    auto queries = load_queries(synthetic::queries_path());
    std::vector<std::string> ids;
    for (const auto& q : queries.queries()) {
        ids.push_back(q.query_id);
    }
    auto direct = evaluate_run(lists, ctx_qrels, ids, cfg.cutoffs);
    CHECK(direct.to_tsv() == outcome.report.to_tsv());

    // Every query has its relevant doc within the baseline ranking, below rank 1.
    for (const auto& [query_id, metrics] : outcome.report.per_query) {
        CHECK(metrics.ndcg > 0.0);
        CHECK(metrics.ndcg < 1.0);
        CHECK(metrics.recall == doctest::Approx(1.0));
    }
}

TEST_CASE("feedback-grounded rewriting lifts bm25 above the baseline") {
    testutil::TempDir tmp;
    testutil::LogCapture logs;
    auto baseline = run_experiment(synthetic::base_config(tmp.path() / "none"));
    auto rewritten = run_experiment(gprf_bm25_config(tmp.path() / "gprf"));
    CHECK(rewritten.report.mean_ndcg > baseline.report.mean_ndcg);
    CHECK(rewritten.report.mean_ndcg == doctest::Approx(1.0));  // oracle rewrites are perfect here
}

TEST_CASE("rm3 and vprf pipelines execute on the bundled corpus") {
    testutil::TempDir tmp;
    testutil::LogCapture logs;

    auto rm3_cfg = synthetic::base_config(tmp.path() / "rm3");
    rm3_cfg.method = Method::Rm3;
    auto rm3_outcome = run_experiment(rm3_cfg);
    CHECK(rm3_outcome.report.per_query.size() == 25);
    CHECK(rm3_outcome.report.mean_recall > 0.9);  // expansion keeps the relevant docs

    auto vprf_cfg = synthetic::base_config(tmp.path() / "vprf");
    vprf_cfg.method = Method::Vprf;
    vprf_cfg.feedback_retriever = RetrieverKind::Dense;
    vprf_cfg.final_retriever = RetrieverKind::Dense;
    vprf_cfg.dense_store_path = synthetic::ensure_dense_store(tmp.path());
    auto vprf_outcome = run_experiment(vprf_cfg);
    CHECK(vprf_outcome.report.per_query.size() == 25);
}

TEST_CASE("pseudo-document generation works without feedback (query-only prompting)") {
    testutil::TempDir tmp;
    testutil::LogCapture logs;
    auto cfg = synthetic::base_config(tmp.path() / "grf");
    cfg.method = Method::GrfConcat;
    cfg.prompt_override = "Write a passage answering: {question}";
    cfg.rewriter_kind = ClientKind::Mock;
    cfg.rewriter_seed = 5;
    cfg.samples_m = 3;
    auto outcome = run_experiment(cfg);
    CHECK(outcome.report.per_query.size() == 25);
}

TEST_CASE("rrf fusion retrieves per candidate and fuses the lists") {
    testutil::TempDir tmp;
    testutil::LogCapture logs;
    auto cfg = gprf_bm25_config(tmp.path() / "rrf");
    cfg.fusion = FusionMode::Rrf;
    auto outcome = run_experiment(cfg);
    CHECK(outcome.report.per_query.size() == 25);
    // The oracle candidate list ranks the relevant document first everywhere.
    CHECK(outcome.report.mean_ndcg > run_experiment(synthetic::base_config(tmp.path() / "none"))
                                         .report.mean_ndcg);
}

TEST_CASE("a prebuilt index artifact yields the same run as indexing in place") {
    testutil::TempDir tmp;
    testutil::LogCapture logs;
    auto collection = load_collection(synthetic::collection_path());
    auto index_path = (tmp.path() / "index.jsonl").string();
    InvertedIndex::build(collection).save(index_path);

    auto inline_cfg = synthetic::base_config(tmp.path() / "inline");
    auto prebuilt_cfg = synthetic::base_config(tmp.path() / "prebuilt");
    prebuilt_cfg.sparse_index_path = index_path;
    auto inline_outcome = run_experiment(inline_cfg);
    auto prebuilt_outcome = run_experiment(prebuilt_cfg);
    CHECK(testutil::read_file(inline_outcome.run_path.string()) ==
          testutil::read_file(prebuilt_outcome.run_path.string()));
}

TEST_CASE("parallel execution produces byte-identical outputs") {
    testutil::TempDir tmp;
    testutil::LogCapture logs;
    auto serial_cfg = gprf_bm25_config(tmp.path() / "serial");
    serial_cfg.jobs = 1;
    auto parallel_cfg = gprf_bm25_config(tmp.path() / "parallel");
    parallel_cfg.jobs = 4;
    auto serial = run_experiment(serial_cfg);
    auto parallel = run_experiment(parallel_cfg);
    CHECK(testutil::read_file(serial.run_path.string()) ==
          testutil::read_file(parallel.run_path.string()));
    CHECK(testutil::read_file(serial.report_tsv_path.string()) ==
          testutil::read_file(parallel.report_tsv_path.string()));
}

TEST_CASE("a manifest replays into a byte-identical run file") {
    testutil::TempDir tmp;
    testutil::LogCapture logs;
    auto cfg = gprf_bm25_config(tmp.path() / "first");
    cfg.rewriter_kind = ClientKind::Mock;  // seeded mock, no oracle shortcut
    cfg.rewriter_seed = 1234;
    auto first = run_experiment(cfg);

    std::ifstream in(first.manifest_path);
    nlohmann::json manifest;
    in >> manifest;
    auto replay_cfg = ExperimentConfig::from_json(manifest.at("config"));
    replay_cfg.output_dir = (tmp.path() / "replay").string();
    auto replay = run_experiment(replay_cfg);
    CHECK(testutil::read_file(first.run_path.string()) ==
          testutil::read_file(replay.run_path.string()));
}

TEST_CASE("the manifest records digests for inputs and outputs") {
    testutil::TempDir tmp;
    testutil::LogCapture logs;
    auto outcome = run_experiment(synthetic::base_config(tmp.path() / "out"));
    std::ifstream in(outcome.manifest_path);
    nlohmann::json manifest;
    in >> manifest;
    CHECK(manifest["command"] == "retrieve");
    CHECK(manifest["inputs"].contains(synthetic::collection_path()));
    CHECK(manifest["outputs"].contains(outcome.run_path.string()));
    for (const auto& [path, digest] : manifest["outputs"].items()) {
        CHECK(digest.get<std::string>().size() == 64);  // sha-256 hex
        CHECK(digest.get<std::string>() == sha256_file(path));
    }
}

TEST_CASE("sha-256 matches the published test vectors") {
    CHECK(sha256_hex("") ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex("abc") ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_hex("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq") ==
          "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
    testutil::TempDir tmp;
    auto path = tmp.write_file("blob.bin", "abc");
    CHECK(sha256_file(path) == sha256_hex("abc"));
}

TEST_CASE("passage noise injection is deterministic and sized by the fraction") {
    auto collection = load_collection(synthetic::collection_path());
    std::vector<std::string> passages = {"p0", "p1", "p2", "p3", "p4", "p5", "p6", "p7", "p8", "p9"};
    CHECK(inject_passage_noise(passages, 0.0, 1, "q00", collection) == passages);

    auto noised = inject_passage_noise(passages, 0.5, 1, "q00", collection);
    CHECK(noised == inject_passage_noise(passages, 0.5, 1, "q00", collection));
    std::size_t replaced = 0;
    for (std::size_t i = 0; i < passages.size(); ++i) {
        if (noised[i] != passages[i]) ++replaced;
    }
    CHECK(replaced == 5);
    CHECK(inject_passage_noise(passages, 0.5, 2, "q00", collection) != noised);
}

TEST_CASE("the data factory selects, audits, and filters per query") {
    testutil::TempDir tmp;
    testutil::LogCapture logs;
    auto cfg = gprf_bm25_config(tmp.path() / "factory");
    cfg.factory_policy = FactoryRetrieverPolicy::Bm25;
    cfg.samples_m = 1;  // boundary: every record's target is the sole candidate
    auto outcome = run_datafactory(cfg);
    CHECK(outcome.queries_processed == 25);
    CHECK(outcome.queries_failed == 0);
    CHECK_FALSE(outcome.exported.empty());
    for (const auto& record : outcome.exported) {
        CHECK(record.retriever_tag == "bm25");
        CHECK(record.utility >= 0.0);
    }

    // The audit lists every (query, candidate, utility) row.
    auto audit = testutil::read_file(outcome.audit_path.string());
    std::size_t rows = std::count(audit.begin(), audit.end(), '\n');
    CHECK(rows == 1 + 25 * cfg.samples_m);  // header + one row per candidate
    CHECK(audit.find("\nq00\t0\t") != std::string::npos);  // rows carry their query id
    CHECK(audit.find("\nq24\t0\t") != std::string::npos);

    // m=1: each exported target equals the sole candidate in the audit.
    auto sft = testutil::read_file(outcome.sft_path.string());
    CHECK(std::count(sft.begin(), sft.end(), '\n') ==
          static_cast<long>(outcome.exported.size()));
}

TEST_CASE("seeded factory runs are byte-identical") {
    testutil::TempDir tmp;
    testutil::LogCapture logs;
    auto cfg = gprf_bm25_config(tmp.path() / "factory");
    cfg.rewriter_kind = ClientKind::Mock;
    cfg.rewriter_seed = 77;
    cfg.factory_policy = FactoryRetrieverPolicy::Bm25;
    cfg.feedback_noise_fraction = 0.5;
    cfg.noise_seed = 9;
    cfg.min_utility = -2.0;  // keep everything, we only compare bytes
    auto first = run_datafactory(cfg);
    auto first_sft = testutil::read_file(first.sft_path.string());
    auto first_audit = testutil::read_file(first.audit_path.string());
    auto first_manifest = testutil::read_file(first.manifest_path.string());

    auto second = run_datafactory(cfg);
    CHECK(testutil::read_file(second.sft_path.string()) == first_sft);
    CHECK(testutil::read_file(second.audit_path.string()) == first_audit);
    CHECK(testutil::read_file(second.manifest_path.string()) == first_manifest);
}

TEST_CASE("a rewriter that degrades half the queries exports only the others") {
    // Hand corpus: two topics. The "good" mock improves queries for topic a
    // (emits the relevant doc's unique terms) and derails topic b queries.
    testutil::TempDir tmp;
    testutil::LogCapture logs;
    std::string collection =
        "ra\tapple apple cider press\n"
        "xa1\tapple apple apple\n"
        "xa2\tapple apple apple juice\n"
        "rb\tboat boat harbor mast\n"
        "xb1\tboat boat boat\n"
        "xb2\tboat boat boat dock\n"
        "zz\tzebra zoo\n";
    auto collection_path = tmp.write_file("c.tsv", collection);
    auto queries_path = tmp.write_file("q.tsv", "qa\tapple\nqb\tboat\n");
    auto qrels_path = tmp.write_file("qr.txt", "qa 0 ra 3\nqb 0 rb 3\n");

    ExperimentConfig cfg;
    cfg.collection_path = collection_path;
    cfg.queries_path = queries_path;
    cfg.qrels_path = qrels_path;
    cfg.output_dir = (tmp.path() / "out").string();
    cfg.method = Method::Gprf;
    cfg.factory_policy = FactoryRetrieverPolicy::Bm25;
    cfg.samples_m = 2;
    cfg.min_utility = 0.0;

    struct HalfGoodRewriter : RewriterClient {
        std::vector<std::string> generate(const std::string& prompt, std::size_t m,
                                          double) override {
            auto query = rflab::detail::extract_user_query(prompt);
            // "apple" queries get the relevant doc's vocabulary; "boat"
            // queries get derailed to an unrelated document.
            std::string text = query == "apple" ? "cider press" : "zebra zoo";
            return std::vector<std::string>(m, text);
        }
    };

    // Drive the per-query pipeline through a locally constructed context so
    // the test can plant its own rewriter implementation.
    auto ctx = load_context(cfg);
    ctx.rewriter = std::make_shared<HalfGoodRewriter>();

    std::vector<SftRecord> records;
    for (const auto& query : ctx.queries.queries()) {
        auto baseline = ctx.retrieve_text(RetrieverKind::Bm25, query.text, cfg.depth, "bm25")
                            .with_query_id(query.query_id);
        auto feedback = FeedbackSet::from_ranking(baseline, cfg.feedback_k);
        RewriteRequest request{query, ctx.passages_for(feedback, cfg.passage_char_budget),
                               cfg.samples_m, 0.0};
        auto candidates = generate_rewrites(*ctx.rewriter, request);
        auto rejection = rejection_sample_best(
            candidates,
            [&](const std::string& text) {
                return ctx.retrieve_text(RetrieverKind::Bm25, text, cfg.depth, "bm25");
            },
            baseline, ctx.qrels);
        SftRecord record;
        record.query_id = query.query_id;
        record.query = query.text;
        record.target = rejection.best.text;
        record.utility = rejection.utilities[rejection.best_index];
        records.push_back(record);
    }
    auto exported = build_sft_dataset(records, 100, 0.0);
    REQUIRE(exported.size() == 1);
    CHECK(exported[0].query_id == "qa");
    CHECK(exported[0].utility > 0.0);
}

TEST_CASE("uniform retriever policy is a deterministic per-query choice") {
    testutil::TempDir tmp;
    testutil::LogCapture logs;
    auto cfg = gprf_bm25_config(tmp.path() / "uniform");
    cfg.final_retriever = RetrieverKind::Bm25;
    cfg.dense_store_path = synthetic::ensure_dense_store(tmp.path());
    cfg.factory_policy = FactoryRetrieverPolicy::Uniform;
    cfg.factory_policy_seed = 3;
    auto outcome = run_datafactory(cfg);
    std::set<std::string> tags;
    for (const auto& record : outcome.exported) tags.insert(record.retriever_tag);
    CHECK(tags == std::set<std::string>{"bm25", "dense"});  // both appear over 25 queries

    auto again = run_datafactory(cfg);
    REQUIRE(again.exported.size() == outcome.exported.size());
    for (std::size_t i = 0; i < again.exported.size(); ++i) {
        CHECK(again.exported[i].retriever_tag == outcome.exported[i].retriever_tag);
    }
}
