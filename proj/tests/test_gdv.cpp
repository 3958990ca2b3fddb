#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "droplab/data.hpp"
#include "droplab/gdv.hpp"
#include "droplab/hash.hpp"

using namespace droplab;

namespace {

// Naive reference: recompute every ordered-pair cosine from scratch.
double gdv_reference(const std::vector<LayerGrads>& layers) {
    double layer_sum = 0.0;
    for (const auto& grads : layers) {
        const size_t g = grads.size();
        double pair_sum = 0.0;
        for (size_t i = 0; i < g; ++i) {
            for (size_t j = 0; j < g; ++j) {
                if (i == j) continue;
                double dot = 0.0, ni = 0.0, nj = 0.0;
                for (size_t x = 0; x < grads[i].size(); ++x) {
                    dot += grads[i][x] * grads[j][x];
                    ni += grads[i][x] * grads[i][x];
                    nj += grads[j][x] * grads[j][x];
                }
                pair_sum += dot / (std::sqrt(ni) * std::sqrt(nj));
            }
        }
        layer_sum += pair_sum / static_cast<double>(g * (g - 1));
    }
    return layer_sum / static_cast<double>(layers.size());
}

std::vector<LayerGrads> random_instance(Rng& rng, size_t n_layers, size_t n_grads, size_t dim) {
    std::vector<LayerGrads> layers(n_layers);
    for (auto& layer : layers) {
        layer.resize(n_grads);
        for (auto& vec : layer) {
            vec.resize(dim);
            for (auto& v : vec) v = rng.normal();
        }
    }
    return layers;
}

std::vector<std::string> names(size_t n) {
    std::vector<std::string> out;
    for (size_t i = 0; i < n; ++i) out.push_back("layer" + std::to_string(i));
    return out;
}

ModelConfig probe_config() {
    ModelConfig cfg;
    cfg.vocab_size = 259;
    cfg.context_len = 16;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    return cfg;
}

} // namespace

TEST_CASE("identical nonzero gradients give GDV exactly 1") {
    LayerGrads grads(5, {1.0, 2.0, -3.0});
    const auto snap = gdv({"only"}, {grads});
    CHECK(std::abs(snap.gdv - 1.0) < 1e-12);
    CHECK(snap.num_minibatches == 5);
    REQUIRE(snap.per_layer.size() == 1);
    CHECK(std::abs(snap.per_layer[0].mean_cosine - 1.0) < 1e-12);
}

TEST_CASE("two orthogonal gradients give GDV exactly 0") {
    LayerGrads grads = {{1.0, 0.0}, {0.0, 1.0}};
    CHECK(gdv({"only"}, {grads}).gdv == 0.0);
}

TEST_CASE("hand-computed three-gradient case") {
    // G = {(1,0), (1,1), (0,1)}: ordered pair cosines 2/sqrt(2) + 2/sqrt(2) + 0
    // over 6 pairs = 2 / (3 sqrt(2)).
    LayerGrads grads = {{1.0, 0.0}, {1.0, 1.0}, {0.0, 1.0}};
    const double expected = 2.0 / (3.0 * std::sqrt(2.0));
    CHECK(std::abs(gdv({"only"}, {grads}).gdv - expected) < 1e-12);
}

TEST_CASE("|G|=2 degenerates to the single ordered-pair average") {
    LayerGrads grads = {{1.0, 1.0}, {1.0, 0.0}};
    const double expected = 1.0 / std::sqrt(2.0);
    CHECK(std::abs(gdv({"only"}, {grads}).gdv - expected) < 1e-12);
}

TEST_CASE("gdv equals the mean over layers of per-layer means") {
    LayerGrads identical(3, {1.0, 0.0});
    LayerGrads orthogonal = {{1.0, 0.0}, {0.0, 1.0}};
    // Different |G| per layer is fine for the invariant test; normalization
    // is per layer.
    const auto snap = gdv({"a", "b"}, {identical, orthogonal});
    REQUIRE(snap.per_layer.size() == 2);
    const double mean = (snap.per_layer[0].mean_cosine + snap.per_layer[1].mean_cosine) / 2.0;
    CHECK(std::abs(snap.gdv - mean) < 1e-15);
}

TEST_CASE("matches the naive reference on random instances") {
    Rng rng(2025);
    for (size_t layers : {1u, 2u, 5u}) {
        for (size_t grads : {2u, 3u, 10u}) {
            for (int rep = 0; rep < 3; ++rep) {
                const auto inst = random_instance(rng, layers, grads, 17);
                const auto snap = gdv(names(layers), inst);
                CHECK(std::abs(snap.gdv - gdv_reference(inst)) < 1e-12);
                CHECK(snap.gdv >= -1.0);
                CHECK(snap.gdv <= 1.0);
            }
        }
    }
}

TEST_CASE("scale invariance: scaling any layer's gradients leaves GDV unchanged") {
    Rng rng(77);
    auto inst = random_instance(rng, 2, 4, 9);
    const double base = gdv(names(2), inst).gdv;
    for (auto& vec : inst[1]) {
        for (auto& v : vec) v *= 3.7;
    }
    CHECK(std::abs(gdv(names(2), inst).gdv - base) < 1e-12);
}

TEST_CASE("permutation invariance over minibatches and layers") {
    Rng rng(88);
    auto inst = random_instance(rng, 3, 5, 11);
    const double base = gdv(names(3), inst).gdv;
    auto shuffled = inst;
    std::reverse(shuffled[0].begin(), shuffled[0].end());
    std::rotate(shuffled[2].begin(), shuffled[2].begin() + 2, shuffled[2].end());
    CHECK(std::abs(gdv(names(3), shuffled).gdv - base) < 1e-12);
    auto layer_perm = inst;
    std::swap(layer_perm[0], layer_perm[2]);
    auto nm = names(3);
    std::swap(nm[0], nm[2]);
    CHECK(std::abs(gdv(nm, layer_perm).gdv - base) < 1e-12);
}

TEST_CASE("zero-norm gradients: reject by default, skip policy renormalizes") {
    LayerGrads grads = {{1.0, 0.0}, {1.0, 0.0}, {0.0, 0.0}};
    CHECK_THROWS_AS(gdv({"only"}, {grads}), ContractError);
    const auto snap = gdv({"only"}, {grads}, ZeroNormPolicy::skip);
    CHECK(std::abs(snap.gdv - 1.0) < 1e-12); // only the identical pair remains
    // All-zero layer has no usable pair even under skip.
    LayerGrads zeros = {{0.0}, {0.0}};
    CHECK_THROWS_AS(gdv({"only"}, {zeros}, ZeroNormPolicy::skip), ContractError);
}

TEST_CASE("gdv input contract errors") {
    CHECK_THROWS_AS(gdv({}, {}), ContractError);
    CHECK_THROWS_AS(gdv({"a"}, {LayerGrads{{1.0}}}), ContractError); // |G| = 1
    LayerGrads ragged = {{1.0, 2.0}, {1.0}};
    CHECK_THROWS_AS(gdv({"a"}, {ragged}), ShapeError);
}

TEST_CASE("probe on a single-offset corpus reproduces identical gradients") {
    // Train split has exactly one valid offset, so all 10 minibatches are the
    // same batch and GDV must be 1.
    ModelConfig cfg = probe_config();
    ModelParams params = ModelParams::init(cfg, Rng(5));
    // 18 tokens, train_end 17, seq 16 -> exactly one valid train offset.
    Corpus corpus = Corpus::from_text("one-offset", std::string(18, 'q'), 0.05);
    REQUIRE(corpus.train_end == 17);
    GdvProbeOptions opt;
    opt.batch_size = 2;
    opt.seq_len = 16;
    opt.seed = 3;
    const auto snap = gdv_probe(params, corpus, opt);
    CHECK(std::abs(snap.gdv - 1.0) < 1e-12);
    CHECK(snap.num_minibatches == 10);
}

TEST_CASE("probe leaves parameter values untouched and grads clean") {
    ModelConfig cfg = probe_config();
    ModelParams params = ModelParams::init(cfg, Rng(6));
    std::string before;
    for (const auto& nt : params.tensors()) {
        const auto d = nt.tensor.data();
        before.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double));
    }
    const uint64_t before_hash = fnv1a64(before);

    Corpus corpus = Corpus::from_text("probe", synth_text(12, 8000), 0.1);
    GdvProbeOptions opt;
    opt.batch_size = 2;
    opt.seq_len = 16;
    gdv_probe(params, corpus, opt);

    std::string after;
    for (const auto& nt : params.tensors()) {
        const auto d = nt.tensor.data();
        after.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double));
        CHECK_FALSE(nt.tensor.has_grad());
    }
    CHECK(fnv1a64(after) == before_hash);
}

TEST_CASE("probe with dropout lowers the mean pairwise cosine") {
    ModelConfig cfg = probe_config();
    ModelParams params = ModelParams::init(cfg, Rng(7));
    Corpus corpus = Corpus::from_text("probe2", synth_text(13, 12000), 0.1);
    GdvProbeOptions opt;
    opt.batch_size = 4;
    opt.seq_len = 16;
    opt.seed = 9;
    opt.dropout_on = false;
    const auto off = gdv_probe(params, corpus, opt);
    opt.dropout_on = true;
    opt.dropout_p = 0.2;
    const auto on = gdv_probe(params, corpus, opt);
    CHECK(off.gdv != on.gdv);
    // Mask sampling adds direction noise on top of batch noise.
    CHECK(on.gdv < off.gdv);
}

TEST_CASE("probe grouping and embedding controls") {
    ModelConfig cfg = probe_config();
    ModelParams params = ModelParams::init(cfg, Rng(8));
    Corpus corpus = Corpus::from_text("probe3", synth_text(14, 8000), 0.1);
    GdvProbeOptions opt;
    opt.batch_size = 2;
    opt.seq_len = 16;
    opt.num_minibatches = 3;

    const auto block = gdv_probe(params, corpus, opt);
    // embedding, layer0, layer1, final (tied head folds into embedding)
    CHECK(block.per_layer.size() == 4);
    bool has_embedding = false;
    for (const auto& s : block.per_layer) has_embedding = has_embedding || s.layer == "embedding";
    CHECK(has_embedding);

    opt.include_embedding = false;
    const auto no_emb = gdv_probe(params, corpus, opt);
    CHECK(no_emb.per_layer.size() == 3);
    for (const auto& s : no_emb.per_layer) CHECK(s.layer != "embedding");

    opt.include_embedding = true;
    opt.grouping = GdvGrouping::per_tensor;
    const auto per_tensor = gdv_probe(params, corpus, opt);
    CHECK(per_tensor.per_layer.size() == params.tensors().size());
}

TEST_CASE("fd_compare agrees exactly on a linear model") {
    std::vector<NamedTensor> params;
    params.push_back({"w", Tensor::from_vector({3}, {1.0, -0.5, 2.0}, true)});
    Tensor x = Tensor::from_vector({3}, {3.0, 1.0, -2.0});
    auto loss = [&]() { return ops::sum(ops::mul(params[0].tensor, x)); };
    const auto report = fd_compare(params, loss, 1e-5, 1e-10);
    CHECK(report.max_rel_err < 1e-10);
    CHECK(report.passed);
}

TEST_CASE("grad_check: 1-layer d=16 transformer under 1e-4") {
    ModelConfig cfg;
    cfg.vocab_size = 259;
    cfg.context_len = 16;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 64;
    REQUIRE(param_count(cfg) < 10000);
    const auto report = grad_check(cfg, 1e-4);
    CAPTURE(report.worst_param);
    CAPTURE(report.max_rel_err);
    CHECK(report.passed);
}

TEST_CASE("grad_check refuses oversized models") {
    ModelConfig cfg; // default ~859k params
    CHECK_THROWS_AS(grad_check(cfg, 1e-4), ContractError);
}

TEST_CASE("a corrupted backward rule is detected") {
    std::vector<NamedTensor> params;
    params.push_back({"w", Tensor::from_vector({2}, {1.0, 2.0}, true)});
    // Forward computes 2w but the installed rule claims d/dw = 3.
    auto wrong_scale = [&](const Tensor& x) {
        Tensor out = Tensor::from_vector(x.shape(),
                                         {x.data()[0] * 2.0, x.data()[1] * 2.0});
        if (Tape::active() && x.requires_grad()) {
            out.set_requires_grad(true);
            Tensor xc = x, oc = out;
            Tape::active()->record("wrong_scale", out, [xc, oc]() mutable {
                const auto go = oc.grad();
                auto gx = xc.grad_accum();
                for (int64_t i = 0; i < xc.numel(); ++i) gx[i] += 3.0 * go[i];
            });
        }
        return out;
    };
    auto loss = [&]() { return ops::sum(wrong_scale(params[0].tensor)); };
    const auto report = fd_compare(params, loss, 1e-5, 1e-4);
    CHECK_FALSE(report.passed);
    CHECK(report.worst_param == "w");
    CHECK(report.max_rel_err > 0.3); // 3 vs 2 is a one-third relative error
}

TEST_CASE("snapshot serializes to json") {
    LayerGrads grads = {{1.0, 0.0}, {0.0, 1.0}};
    auto snap = gdv({"only"}, {grads});
    snap.step = 500;
    const auto j = snap.to_json();
    CHECK(j.at("step") == 500);
    CHECK(j.at("gdv") == 0.0);
    CHECK(j.at("minibatches") == 2);
    CHECK(j.at("per_layer").at("only") == 0.0);
}
