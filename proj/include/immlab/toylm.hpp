#pragma once

// Small pre-norm decoder-only transformer with a hand-written backward pass.
//
// Parameters (y = x W convention, W stored [in x out]):
//   embed.weight [V x d]        token embedding; fixed sinusoidal positions are added
//   layers.n.norm1.g [d]        bias-free LayerNorm gain before attention
//   layers.n.attn.w{q,k,v,o}    [d x d]
//   layers.n.norm2.g [d]        bias-free LayerNorm gain before the MLP
//   layers.n.mlp.w1 [d x F], layers.n.mlp.w2 [F x d]   GELU MLP
//   norm_f.g [d], head.weight [d x V]

#include "immlab/checkpoint.hpp"
#include "immlab/merge.hpp"
#include "immlab/rng.hpp"
#include "immlab/tasks.hpp"

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace immlab::lm {

using tasks::TokenId;
using Sequence = tasks::TokenizedPair;

struct ModelConfig {
    std::size_t vocab_size = 32;
    std::size_t d_model = 64;
    std::size_t n_layers = 8;
    std::size_t n_heads = 4;
    std::size_t d_ff = 256;
    std::size_t max_seq_len = 128;

    void validate() const;
    std::size_t head_dim() const { return d_model / n_heads; }
    std::string to_json() const;
    static ModelConfig from_json(std::string_view text);
    static ModelConfig from_checkpoint(const Checkpoint& c);

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TrainConfig {
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double epsilon = 1e-8;
    double weight_decay = 0.01;
    std::size_t epochs = 2;
    std::size_t batch_size = 32;
    double warmup_fraction = 0.03;
    std::uint64_t seed = 0;

    void validate() const;
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct SampleConfig {
    double temperature = 0.0; // 0 = greedy
    std::size_t max_new_tokens = 96;
    std::uint64_t seed = 0;
};

template <class T>
struct BlockParams {
    std::vector<T> norm1, wq, wk, wv, wo, norm2, w1, w2;
};

template <class T>
struct Params {
    ModelConfig cfg;
    std::vector<T> embed, head, norm_f;
    std::vector<BlockParams<T>> blocks;

    static Params zeros(const ModelConfig& cfg);

    // f(name, shape, values) for every tensor, in a fixed order.
    template <class F>
    void for_each(F&& f) {
        visit(*this, f);
    }
    template <class F>
    void for_each(F&& f) const {
        visit(*this, f);
    }

private:
    template <class Self, class F>
    static void visit(Self& p, F& f) {
        const std::size_t d = p.cfg.d_model;
        const std::size_t V = p.cfg.vocab_size;
        const std::size_t F_ = p.cfg.d_ff;
        f(std::string("embed.weight"), std::vector<std::size_t>{V, d}, p.embed);
        f(std::string("head.weight"), std::vector<std::size_t>{d, V}, p.head);
        f(std::string("norm_f.g"), std::vector<std::size_t>{d}, p.norm_f);
        for (std::size_t n = 0; n < p.blocks.size(); ++n) {
            auto& b = p.blocks[n];
            const std::string pre = "layers." + std::to_string(n) + ".";
            f(pre + "attn.wq", std::vector<std::size_t>{d, d}, b.wq);
            f(pre + "attn.wk", std::vector<std::size_t>{d, d}, b.wk);
            f(pre + "attn.wv", std::vector<std::size_t>{d, d}, b.wv);
            f(pre + "attn.wo", std::vector<std::size_t>{d, d}, b.wo);
            f(pre + "mlp.w1", std::vector<std::size_t>{d, F_}, b.w1);
            f(pre + "mlp.w2", std::vector<std::size_t>{F_, d}, b.w2);
            f(pre + "norm1.g", std::vector<std::size_t>{d}, b.norm1);
            f(pre + "norm2.g", std::vector<std::size_t>{d}, b.norm2);
        }
    }
};

// Names of every parameter tensor of a model with this config.
std::vector<std::string> tensor_names(const ModelConfig& cfg);

// Reads the config from the "model_config" metadata and checks every tensor
// name and shape against it.
template <class T>
Params<T> params_from_checkpoint(const Checkpoint& c);

// Writes the parameters with "model_config" and "format_version" metadata;
// extra metadata entries are copied in.
Checkpoint to_checkpoint(const Params<float>& p,
                         const std::map<std::string, std::string>& extra_metadata = {});

Delta grads_to_delta(const Params<double>& g);

// Normal(0, 0.02) weights, output projections (attn.wo, mlp.w2) scaled by
// 1/sqrt(2 N), norm gains 1. Each tensor draws from its own stream seeded with
// derive_tensor_seed(seed, name).
Checkpoint init_params(const ModelConfig& cfg, std::uint64_t seed);

// ---- forward / backward -----------------------------------------------------

// Sum over masked positions of -log p(token), plus gradients of
// grad_scale * (that sum) accumulated into `grads` when non-null. Sequences are
// processed in order, and every reduction has a fixed order.
template <class T>
double loss_and_grads(const Params<T>& p, std::span<const Sequence> batch, double grad_scale,
                      Params<double>* grads);

// Logits [len x V] for one token sequence.
template <class T>
std::vector<T> forward_logits(const Params<T>& p, std::span<const TokenId> tokens);

Tensor forward(const Checkpoint& model, std::span<const TokenId> tokens);

std::size_t count_targets(std::span<const Sequence> batch);

struct LossAndGrads {
    double loss = 0.0; // mean over masked positions
    Delta grads;       // gradient of the mean loss, congruent with the model
};

LossAndGrads sft_loss_and_grads(const Checkpoint& model, std::span<const Sequence> batch);

// Mean loss without gradients.
double mean_loss(const Params<float>& p, std::span<const Sequence> batch);

// ---- optimizer ----------------------------------------------------------------

struct AdamState {
    Params<double> m;
    Params<double> v;
    std::size_t total_steps = 1;

    AdamState(const ModelConfig& cfg, std::size_t total_steps);
};

double learning_rate_at(const TrainConfig& tcfg, std::size_t step, std::size_t total_steps);

// Decoupled weight decay Adam with bias correction; linear warmup over
// ceil(warmup_fraction * total_steps) steps, then constant. step is 1-based.
void adamw_step(Params<float>& model, const Params<double>& grads, AdamState& state,
                const TrainConfig& tcfg, std::size_t step);

void adamw_step(Checkpoint& model, const Delta& grads, AdamState& state, const TrainConfig& tcfg,
                std::size_t step);

struct TrainReport {
    std::vector<double> step_losses;
    std::size_t steps = 0;
};

std::size_t steps_per_epoch(std::size_t n_examples, std::size_t batch_size);

// Minibatch SFT: each epoch shuffles the data with a stream derived from
// tcfg.seed and the epoch index, then steps over consecutive batches.
TrainReport train_sft(Params<float>& model, std::span<const Sequence> data, const TrainConfig& tcfg);

// ---- sampling -----------------------------------------------------------------

struct SampleRequest {
    std::vector<TokenId> prompt;
    double temperature = 0.0;
    std::size_t max_new_tokens = 96;
    std::uint64_t seed = 0;
};

// Picks a token from logits: argmax (lowest id on ties) at temperature 0,
// otherwise inverse-CDF over ascending ids of softmax(logits / temperature).
TokenId pick_token(std::span<const float> logits, double temperature, SeededStream& stream);

// Decodes every request to EOS, max_new_tokens or the context limit. Each
// request owns its stream, so results do not depend on how requests are
// grouped. The returned tokens exclude the prompt and the EOS.
std::vector<std::vector<TokenId>> sample_batch(const Params<float>& model,
                                               std::span<const SampleRequest> requests);

std::vector<TokenId> sample_completion(const Checkpoint& model, std::span<const TokenId> prompt,
                                       const SampleConfig& scfg);

} // namespace immlab::lm
