#include "simscore/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <string>

#include "json.hpp"
#include "simscore/errors.hpp"

namespace simscore {
namespace {

using nlohmann::json;

std::string trim(const std::string& s) {
    const std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// # starts a comment unless it sits inside a quoted value
std::string strip_comment(const std::string& s) {
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '"') quoted = !quoted;
        else if (s[i] == '#' && !quoted) return s.substr(0, i);
    }
    return s;
}

std::string parse_string(const std::string& key, const std::string& raw) {
    if (raw.size() >= 2 && raw.front() == '"' && raw.back() == '"')
        return raw.substr(1, raw.size() - 2);
    if (!raw.empty() && (raw.front() == '"' || raw.back() == '"'))
        throw DataError("config key '" + key + "': unbalanced quotes in " + raw);
    return raw;
}

std::uint64_t parse_uint(const std::string& key, const std::string& raw) {
    try {
        if (!raw.empty() && raw.front() == '-') throw std::invalid_argument("negative");
        std::size_t pos = 0;
        const unsigned long long v = std::stoull(raw, &pos);
        if (pos != raw.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw DataError("config key '" + key + "': expected a non-negative integer, got '" + raw +
                        "'");
    }
}

std::size_t parse_size(const std::string& key, const std::string& raw) {
    return static_cast<std::size_t>(parse_uint(key, raw));
}

double parse_double(const std::string& key, const std::string& raw) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(raw, &pos);
        if (pos != raw.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw DataError("config key '" + key + "': expected a number, got '" + raw + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& raw) {
    if (raw == "true") return true;
    if (raw == "false") return false;
    throw DataError("config key '" + key + "': expected true or false, got '" + raw + "'");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& key_table() {
    static const std::map<std::string, Setter> table = {
        {"model.vocab_size",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.vocab_size = parse_size(k, v);
         }},
        {"model.embed_dim",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.embed_dim = parse_size(k, v);
         }},
        {"model.n_layers",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.n_layers = parse_size(k, v);
         }},
        {"model.n_heads",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.n_heads = parse_size(k, v);
         }},
        {"model.ffn_dim",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.ffn_dim = parse_size(k, v);
         }},
        {"model.lstm_hidden",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.lstm_hidden = parse_size(k, v);
         }},
        {"model.lstm_layers",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.lstm_layers = parse_size(k, v);
         }},
        {"model.max_seq_len",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.max_seq_len = parse_size(k, v);
         }},
        {"model.sector_hidden",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.sector_hidden = parse_size(k, v);
         }},
        {"model.head_variant",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             try {
                 c.model.head_variant = head_variant_of(parse_string(k, v));
             } catch (const ConfigError& e) {
                 throw DataError("config key '" + k + "': " + e.what());
             }
         }},
        {"model.encoder_variant",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             try {
                 c.model.encoder_variant = encoder_variant_of(parse_string(k, v));
             } catch (const ConfigError& e) {
                 throw DataError("config key '" + k + "': " + e.what());
             }
         }},
        {"model.freeze_embeddings",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.freeze_embeddings = parse_bool(k, v);
         }},
        {"trainer.epochs",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.trainer.epochs = parse_size(k, v);
         }},
        {"trainer.batch_size",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.trainer.batch_size = parse_size(k, v);
         }},
        {"trainer.lr_transformer",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.trainer.lr_transformer = parse_double(k, v);
         }},
        {"trainer.lr_head",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.trainer.lr_head = parse_double(k, v);
         }},
        {"trainer.awp_epsilon",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.trainer.awp_epsilon = parse_double(k, v);
         }},
        {"trainer.awp_start_epoch",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.trainer.awp_start_epoch = parse_size(k, v);
         }},
        {"trainer.lambda_mse",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.trainer.lambda_mse = parse_double(k, v);
         }},
        {"trainer.seed",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.trainer.seed = parse_uint(k, v);
         }},
        {"trainer.eval_every",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.trainer.eval_every = parse_size(k, v);
         }},
        {"trainer.clip_norm",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.trainer.clip_norm = parse_double(k, v);
         }},
        {"trainer.weight_decay",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.trainer.weight_decay = parse_double(k, v);
         }},
        {"trainer.awp_encoder_only",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.trainer.awp_encoder_only = parse_bool(k, v);
         }},
        {"trainer.shuffle_targets",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.trainer.shuffle_targets_on = parse_bool(k, v);
         }},
        {"trainer.max_len",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.trainer.max_len = parse_size(k, v);
         }},
        {"trainer.f1_threshold",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.trainer.f1_threshold = parse_double(k, v);
         }},
        {"run.data",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.data_path = parse_string(k, v);
         }},
        {"run.folds",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.folds_path = parse_string(k, v);
         }},
        {"run.out",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.out_dir = parse_string(k, v);
         }},
        {"run.fold_index",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.fold_index = parse_size(k, v);
         }},
        {"rtd.steps",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.rtd_steps = parse_size(k, v);
         }},
        {"rtd.replace_prob",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.rtd_replace_prob = parse_double(k, v);
         }},
    };
    return table;
}

void assign(RunConfig& cfg, const std::string& key, const std::string& value) {
    const auto& table = key_table();
    const auto it = table.find(key);
    if (it == table.end()) throw DataError("unknown config key '" + key + "'");
    it->second(cfg, key, value);
}

}  // namespace

RunConfig parse_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config file " + path);

    RunConfig cfg;
    std::string line;
    std::string section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(strip_comment(line));
        if (line.empty()) continue;
        const std::string where = path + ":" + std::to_string(lineno);

        if (line.front() == '[') {
            if (line.back() != ']' || line.size() < 3)
                throw DataError(where + ": malformed section header '" + line + "'");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty())
                throw DataError(where + ": malformed section header '" + line + "'");
            continue;
        }

        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw DataError(where + ": expected key = value, got '" + line + "'");
        std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw DataError(where + ": expected key = value, got '" + line + "'");

        // dotted keys are absolute; bare keys live in the open section
        if (key.find('.') == std::string::npos) {
            if (section.empty())
                throw DataError(where + ": key '" + key + "' outside any section");
            key = section + "." + key;
        }
        try {
            assign(cfg, key, value);
        } catch (const DataError& e) {
            throw DataError(where + ": " + e.what());
        }
    }
    return cfg;
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
    const std::size_t eq = assignment.find('=');
    if (eq == std::string::npos)
        throw DataError("override '" + assignment + "' must have the form key=value");
    const std::string key = trim(assignment.substr(0, eq));
    const std::string value = trim(assignment.substr(eq + 1));
    if (key.empty() || value.empty())
        throw DataError("override '" + assignment + "' must have the form key=value");
    assign(cfg, key, value);
}

std::string run_config_to_json(const RunConfig& cfg) {
    json j;
    j["model"] = {
        {"vocab_size", cfg.model.vocab_size},
        {"embed_dim", cfg.model.embed_dim},
        {"n_layers", cfg.model.n_layers},
        {"n_heads", cfg.model.n_heads},
        {"ffn_dim", cfg.model.ffn_dim},
        {"lstm_hidden", cfg.model.lstm_hidden},
        {"lstm_layers", cfg.model.lstm_layers},
        {"max_seq_len", cfg.model.max_seq_len},
        {"sector_hidden", cfg.model.sector_hidden},
        {"head_variant", to_string(cfg.model.head_variant)},
        {"encoder_variant", to_string(cfg.model.encoder_variant)},
        {"freeze_embeddings", cfg.model.freeze_embeddings},
    };
    j["trainer"] = {
        {"epochs", cfg.trainer.epochs},
        {"batch_size", cfg.trainer.batch_size},
        {"lr_transformer", cfg.trainer.lr_transformer},
        {"lr_head", cfg.trainer.lr_head},
        {"awp_epsilon", cfg.trainer.awp_epsilon},
        {"awp_start_epoch", cfg.trainer.awp_start_epoch},
        {"lambda_mse", cfg.trainer.lambda_mse},
        {"seed", cfg.trainer.seed},
        {"eval_every", cfg.trainer.eval_every},
        {"clip_norm", cfg.trainer.clip_norm},
        {"weight_decay", cfg.trainer.weight_decay},
        {"awp_encoder_only", cfg.trainer.awp_encoder_only},
        {"shuffle_targets", cfg.trainer.shuffle_targets_on},
        {"max_len", cfg.trainer.max_len},
        {"f1_threshold", cfg.trainer.f1_threshold},
    };
    j["run"] = {
        {"data", cfg.data_path},
        {"folds", cfg.folds_path},
        {"out", cfg.out_dir},
        {"fold_index", cfg.fold_index},
    };
    j["rtd"] = {
        {"steps", cfg.rtd_steps},
        {"replace_prob", cfg.rtd_replace_prob},
    };
    return j.dump(2) + "\n";
}

}  // namespace simscore
