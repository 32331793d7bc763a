#pragma once

// Parameter storage and the small set of layer builders shared by the
// backbone, the weight generator and the transformer bottleneck.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "dyco/autodiff.hpp"

namespace dyco {

using Params = std::map<std::string, Tensor, std::less<>>;

/// Lazily declares graph leaves for named parameters, shapes taken from the store.
class ParamNodes {
public:
    ParamNodes(Graph& graph, const Params& store) : graph_(graph), store_(store) {}

    Node operator()(const std::string& name) {
        auto it = cache_.find(name);
        if (it != cache_.end()) return it->second;
        auto p = store_.find(name);
        if (p == store_.end()) throw Error("params: missing parameter '" + name + "'");
        const Node n = graph_.input(name, p->second.shape(), true);
        cache_.emplace(name, n);
        return n;
    }

    Graph& graph() { return graph_; }
    const Params& store() const { return store_; }

private:
    Graph& graph_;
    const Params& store_;
    std::map<std::string, Node, std::less<>> cache_;
};

inline Tensor random_normal(Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : t.values()) v = dist(rng);
    return t;
}

/// He-initialized weight [in, out] under `prefix.w`, zero bias under `prefix.b`.
inline void init_linear(Params& params, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                        double gain = 1.0) {
    params[prefix + ".w"] = random_normal(Shape{in, out}, gain * std::sqrt(2.0 / static_cast<double>(in)), rng);
    params[prefix + ".b"] = Tensor(Shape{out});
}

inline Node linear(ParamNodes& p, const std::string& prefix, Node x) {
    Graph& g = p.graph();
    return g.add(g.matmul(x, p(prefix + ".w")), p(prefix + ".b"));
}

inline void init_layer_norm(Params& params, const std::string& prefix, std::size_t width) {
    params[prefix + ".g"] = Tensor(Shape{width}, 1.0);
    params[prefix + ".b"] = Tensor(Shape{width});
}

inline Node layer_norm(ParamNodes& p, const std::string& prefix, Node x) {
    return p.graph().layer_norm(x, p(prefix + ".g"), p(prefix + ".b"));
}

struct AttentionConfig {
    std::size_t width = 32;
    std::size_t heads = 4;
    std::size_t ffn_hidden = 64;
    std::size_t rel_dim = 3;
};

inline void init_attention(Params& params, const std::string& prefix, const AttentionConfig& cfg, Rng& rng) {
    if (cfg.heads == 0 || cfg.width % cfg.heads != 0)
        throw Error("attention: width " + std::to_string(cfg.width) + " not divisible by " +
                    std::to_string(cfg.heads) + " heads");
    init_layer_norm(params, prefix + ".ln1", cfg.width);
    for (const char* proj : {".q", ".k", ".v"}) init_linear(params, prefix + proj, cfg.width, cfg.width, rng, 0.5);
    init_linear(params, prefix + ".o", cfg.width, cfg.width, rng, 0.5);
    init_linear(params, prefix + ".rel", cfg.rel_dim, cfg.heads, rng, 0.5);
    init_layer_norm(params, prefix + ".ln2", cfg.width);
    init_linear(params, prefix + ".ff1", cfg.width, cfg.ffn_hidden, rng);
    init_linear(params, prefix + ".ff2", cfg.ffn_hidden, cfg.width, rng, 0.5);
}

/// Pre-norm self-attention block over tokens [T, D] with an additive
/// relative-position bias on the logits: bias_h(i, j) = rel[i, j, :] . w_h + b_h.
/// Followed by a residual ReLU feed-forward sublayer.
/// If `weights` is given, the per-head [T, T] attention matrices are appended.
inline Node attention_block(ParamNodes& p, const std::string& prefix, Node tokens, Node rel_pos,
                            const AttentionConfig& cfg, std::vector<Node>* weights = nullptr) {
    Graph& g = p.graph();
    const Shape ts = g.shape(tokens);
    if (ts.size() != 2 || ts[1] != cfg.width)
        throw Error("attention: tokens must be [T, " + std::to_string(cfg.width) + "], got " + shape_str(ts));
    if (cfg.heads == 0 || cfg.width % cfg.heads != 0)
        throw Error("attention: width " + std::to_string(cfg.width) + " not divisible by " +
                    std::to_string(cfg.heads) + " heads");
    const std::size_t t = ts[0];
    const std::size_t dh = cfg.width / cfg.heads;
    if (g.shape(rel_pos) != Shape{t, t, cfg.rel_dim})
        throw Error("attention: rel_pos must be " + shape_str(Shape{t, t, cfg.rel_dim}) + ", got " +
                    shape_str(g.shape(rel_pos)));

    const Node a = layer_norm(p, prefix + ".ln1", tokens);
    const Node q = linear(p, prefix + ".q", a);
    const Node k = linear(p, prefix + ".k", a);
    const Node v = linear(p, prefix + ".v", a);
    const Node bias = linear(p, prefix + ".rel", g.reshape(rel_pos, Shape{t * t, cfg.rel_dim}));
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<Node> heads;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        const Node qh = g.slice_cols(q, h * dh, (h + 1) * dh);
        const Node kh = g.slice_cols(k, h * dh, (h + 1) * dh);
        const Node vh = g.slice_cols(v, h * dh, (h + 1) * dh);
        const Node logits = g.add(g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt),
                                  g.reshape(g.slice_cols(bias, h, h + 1), Shape{t, t}));
        const Node attn = g.softmax(logits);
        if (weights) weights->push_back(attn);
        heads.push_back(g.matmul(attn, vh));
    }
    const Node merged = heads.size() == 1 ? heads[0] : g.concat(heads);
    const Node h1 = g.add(tokens, linear(p, prefix + ".o", merged));
    const Node ff = linear(p, prefix + ".ff2", g.relu(linear(p, prefix + ".ff1", layer_norm(p, prefix + ".ln2", h1))));
    return g.add(h1, ff);
}

/// Tensor-level convenience: runs one attention block on concrete tokens.
inline Tensor mhsa_forward(const Tensor& tokens, const Params& params, const std::string& prefix,
                           const Tensor& rel_pos, const AttentionConfig& cfg) {
    Graph g;
    ParamNodes p(g, params);
    const Node x = g.constant(tokens);
    const Node rel = g.constant(rel_pos);
    const Node y = attention_block(p, prefix, x, rel, cfg);
    Bindings b(params.begin(), params.end());
    return evaluate(g, b).value(y);
}

}  // namespace dyco
