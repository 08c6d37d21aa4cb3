// SPDX-License-Identifier: Apache-2.0
#include "dreamcatcher/corpus.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "dreamcatcher/error.hpp"
#include "jsonl.hpp"

static_assert(std::endian::native == std::endian::little,
              "activation store maps f32le data directly and needs a little-endian host");

namespace dreamcatcher {

using nlohmann::json;
namespace fs = std::filesystem;

std::string_view to_string(GenMode mode) noexcept {
    return mode == GenMode::Normal ? "normal" : "uncertainty";
}

std::string_view to_string(Site site) noexcept {
    switch (site) {
        case Site::AttnOutput: return "attn_output";
        case Site::MlpOutput: return "mlp_output";
        case Site::HiddenState: return "hidden_state";
    }
    return "?";
}

std::string_view to_string(Verdict verdict) noexcept {
    return verdict == Verdict::Correct ? "correct" : "incorrect";
}

GenMode parse_mode(std::string_view s) {
    if (s == "normal") return GenMode::Normal;
    if (s == "uncertainty") return GenMode::Uncertainty;
    throw ValidationError("unknown generation mode '" + std::string(s) + "'");
}

Site parse_site(std::string_view s) {
    for (Site site : kAllSites)
        if (to_string(site) == s) return site;
    throw ValidationError("unknown activation site '" + std::string(s) + "'");
}

Verdict parse_verdict(std::string_view s) {
    if (s == "correct") return Verdict::Correct;
    if (s == "incorrect") return Verdict::Incorrect;
    throw ValidationError("unknown verdict '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// questions / generations / gold

std::vector<Question> load_questions(const fs::path& path) {
    std::vector<Question> out;
    std::unordered_set<std::string> seen;
    jsonl::for_each_line(path, [&](const json& obj, std::size_t line) {
        Question q;
        q.id = jsonl::required<std::string>(obj, "id", path, line);
        q.text = jsonl::required<std::string>(obj, "text", path, line);
        q.language = jsonl::optional<std::string>(obj, "language", path, line).value_or("");
        q.answer = jsonl::optional<std::string>(obj, "answer", path, line);
        q.qtype = jsonl::optional<std::string>(obj, "qtype", path, line);
        if (q.id.empty()) throw ParseError(path.string(), line, "empty id");
        if (q.text.empty()) throw ParseError(path.string(), line, "empty text");
        if (q.answer && q.answer->empty())
            throw ParseError(path.string(), line, "answer present but empty");
        if (!seen.insert(q.id).second)
            throw ValidationError(path.string() + ":" + std::to_string(line) +
                                  ": duplicate question id '" + q.id + "'");
        out.push_back(std::move(q));
    });
    return out;
}

void write_questions(const fs::path& path, std::span<const Question> questions) {
    jsonl::Writer w(path);
    for (const auto& q : questions) {
        json obj{{"id", q.id}, {"text", q.text}, {"language", q.language}};
        if (q.answer) obj["answer"] = *q.answer;
        if (q.qtype) obj["qtype"] = *q.qtype;
        w.write(obj);
    }
}

std::vector<Generation> read_generations(const fs::path& path) {
    std::vector<Generation> out;
    std::set<GenerationKey> seen;
    jsonl::for_each_line(path, [&](const json& obj, std::size_t line) {
        Generation g;
        g.question_id = jsonl::required<std::string>(obj, "question_id", path, line);
        try {
            g.mode = parse_mode(jsonl::required<std::string>(obj, "mode", path, line));
        } catch (const ValidationError& e) {
            throw ParseError(path.string(), line, e.what());
        }
        g.index = jsonl::required<int>(obj, "index", path, line);
        g.text = jsonl::required<std::string>(obj, "text", path, line);
        if (g.index < 0) throw ParseError(path.string(), line, "negative index");
        if (!seen.insert(key_of(g)).second)
            throw ValidationError(path.string() + ":" + std::to_string(line) +
                                  ": duplicate generation (" + g.question_id + ", " +
                                  std::string(to_string(g.mode)) + ", " +
                                  std::to_string(g.index) + ")");
        out.push_back(std::move(g));
    });
    return out;
}

void check_k(std::span<const Generation> generations, int k) {
    if (k < 2) throw ValidationError("k must be >= 2, got " + std::to_string(k));
    std::map<std::string, std::vector<int>> normal;
    std::vector<std::string> order;
    for (const auto& g : generations) {
        auto [it, inserted] = normal.try_emplace(g.question_id);
        if (inserted) order.push_back(g.question_id);
        if (g.mode == GenMode::Normal) it->second.push_back(g.index);
    }
    std::vector<std::string> bad;
    for (const auto& id : order) {
        auto idx = normal[id];
        std::sort(idx.begin(), idx.end());
        bool ok = static_cast<int>(idx.size()) == k;
        for (int i = 0; ok && i < k; ++i) ok = idx[i] == i;
        if (!ok) bad.push_back(id + " (" + std::to_string(idx.size()) + " normal)");
    }
    if (!bad.empty()) {
        std::string msg = "questions without exactly k=" + std::to_string(k) +
                          " normal generations:";
        for (const auto& b : bad) msg += " " + b;
        throw ValidationError(msg);
    }
}

std::vector<Generation> load_generations(const fs::path& path, int k) {
    auto gens = read_generations(path);
    check_k(gens, k);
    return gens;
}

void write_generations(const fs::path& path, std::span<const Generation> generations) {
    jsonl::Writer w(path);
    for (const auto& g : generations)
        w.write(json{{"question_id", g.question_id},
                     {"mode", to_string(g.mode)},
                     {"index", g.index},
                     {"text", g.text}});
}

std::vector<GoldLabel> load_gold(const fs::path& path) {
    std::vector<GoldLabel> out;
    jsonl::for_each_line(path, [&](const json& obj, std::size_t line) {
        GoldLabel l;
        try {
            l.generation.question_id = jsonl::required<std::string>(obj, "question_id", path, line);
            l.generation.mode = parse_mode(jsonl::required<std::string>(obj, "mode", path, line));
            l.generation.index = jsonl::required<int>(obj, "index", path, line);
            l.verdict = parse_verdict(jsonl::required<std::string>(obj, "verdict", path, line));
        } catch (const ValidationError& e) {
            throw ParseError(path.string(), line, e.what());
        }
        out.push_back(std::move(l));
    });
    return out;
}

void write_gold(const fs::path& path, std::span<const GoldLabel> labels) {
    jsonl::Writer w(path);
    for (const auto& l : labels)
        w.write(json{{"question_id", l.generation.question_id},
                     {"mode", to_string(l.generation.mode)},
                     {"index", l.generation.index},
                     {"verdict", to_string(l.verdict)}});
}

// ---------------------------------------------------------------------------
// manifest

ActivationManifest load_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError(path.string(), 0, e.what());
    }
    ActivationManifest m;
    try {
        m.model_name = doc.at("model_name").get<std::string>();
        m.num_layers = doc.at("num_layers").get<int>();
        m.hidden_size = doc.at("hidden_size").get<int>();
        m.dtype = doc.at("dtype").get<std::string>();
        for (const auto& s : doc.at("sites")) m.sites.push_back(parse_site(s.get<std::string>()));
        for (const auto& r : doc.at("records")) {
            ActivationEntry e;
            e.question_id = r.at("question_id").get<std::string>();
            e.site = parse_site(r.at("site").get<std::string>());
            e.layer = r.at("layer").get<int>();
            e.byte_offset = r.at("byte_offset").get<std::uint64_t>();
            m.records.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw ParseError(path.string(), 0, e.what());
    }
    if (m.dtype != "f32le") throw ValidationError("unsupported dtype '" + m.dtype + "'");
    if (m.num_layers <= 0 || m.hidden_size <= 0)
        throw ValidationError("manifest needs positive num_layers and hidden_size");
    const std::uint64_t stride = static_cast<std::uint64_t>(m.hidden_size) * sizeof(float);
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        const auto& r = m.records[i];
        if (r.layer < 0 || r.layer >= m.num_layers)
            throw ValidationError("record " + std::to_string(i) + ": layer " +
                                  std::to_string(r.layer) + " out of range");
        if (std::find(m.sites.begin(), m.sites.end(), r.site) == m.sites.end())
            throw ValidationError("record " + std::to_string(i) + ": site not declared");
        if (r.byte_offset % sizeof(float) != 0)
            throw ValidationError("record " + std::to_string(i) + ": misaligned offset");
        if (i > 0 && r.byte_offset < m.records[i - 1].byte_offset + stride)
            throw ValidationError("record " + std::to_string(i) +
                                  ": offsets must be strictly increasing and non-overlapping");
    }
    return m;
}

void write_manifest(const fs::path& path, const ActivationManifest& m) {
    json sites = json::array();
    for (Site s : m.sites) sites.push_back(to_string(s));
    json records = json::array();
    for (const auto& r : m.records)
        records.push_back(json{{"question_id", r.question_id},
                               {"site", to_string(r.site)},
                               {"layer", r.layer},
                               {"byte_offset", r.byte_offset}});
    json doc{{"model_name", m.model_name}, {"num_layers", m.num_layers},
             {"hidden_size", m.hidden_size}, {"sites", sites},
             {"dtype", m.dtype},           {"records", records}};
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << doc.dump(1) << '\n';
}

void write_activations(const fs::path& manifest_path, const fs::path& bin_path,
                       std::string model_name, int num_layers, int hidden_size,
                       std::vector<Site> sites, std::span<const ActivationRow> rows) {
    ActivationManifest m;
    m.model_name = std::move(model_name);
    m.num_layers = num_layers;
    m.hidden_size = hidden_size;
    m.sites = std::move(sites);
    std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
    if (!bin) throw IoError("cannot write " + bin_path.string());
    std::uint64_t offset = 0;
    for (const auto& row : rows) {
        if (static_cast<int>(row.values.size()) != hidden_size)
            throw ValidationError("activation row for " + row.question_id + " has dimension " +
                                  std::to_string(row.values.size()) + ", expected " +
                                  std::to_string(hidden_size));
        bin.write(reinterpret_cast<const char*>(row.values.data()),
                  static_cast<std::streamsize>(row.values.size() * sizeof(float)));
        m.records.push_back({row.question_id, row.site, row.layer, offset});
        offset += row.values.size() * sizeof(float);
    }
    bin.close();
    if (!bin) throw IoError("short write to " + bin_path.string());
    write_manifest(manifest_path, m);
}

// ---------------------------------------------------------------------------
// ActivationStore

namespace {

class MappedFile {
public:
    explicit MappedFile(const fs::path& path) {
        fd_ = ::open(path.c_str(), O_RDONLY);
        if (fd_ < 0) throw IoError("cannot open " + path.string());
        struct stat st {};
        if (::fstat(fd_, &st) != 0) {
            ::close(fd_);
            throw IoError("cannot stat " + path.string());
        }
        size_ = static_cast<std::uint64_t>(st.st_size);
        if (size_ > 0) {
            void* p = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd_, 0);
            if (p == MAP_FAILED) {
                ::close(fd_);
                throw IoError("cannot map " + path.string());
            }
            data_ = static_cast<const std::byte*>(p);
        }
    }
    MappedFile(const MappedFile&) = delete;
    MappedFile& operator=(const MappedFile&) = delete;
    ~MappedFile() {
        if (data_) ::munmap(const_cast<std::byte*>(data_), size_);
        if (fd_ >= 0) ::close(fd_);
    }
    const std::byte* data() const noexcept { return data_; }
    std::uint64_t size() const noexcept { return size_; }

private:
    int fd_ = -1;
    const std::byte* data_ = nullptr;
    std::uint64_t size_ = 0;
};

}  // namespace

struct ActivationStore::Impl {
    ActivationManifest manifest;
    std::unique_ptr<MappedFile> file;
    // question -> slot table [site * num_layers + layer] -> record index (-1 absent)
    std::unordered_map<std::string, std::vector<std::int64_t>> index;
    std::vector<std::string> order;

    std::int64_t find(std::string_view qid, Site site, int layer) const {
        if (layer < 0 || layer >= manifest.num_layers) return -1;
        auto it = index.find(std::string(qid));
        if (it == index.end()) return -1;
        return it->second[static_cast<std::size_t>(site) * manifest.num_layers + layer];
    }
};

ActivationStore::ActivationStore(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
ActivationStore::ActivationStore(ActivationStore&&) noexcept = default;
ActivationStore& ActivationStore::operator=(ActivationStore&&) noexcept = default;
ActivationStore::~ActivationStore() = default;

ActivationStore ActivationStore::open(const fs::path& manifest_path, const fs::path& bin_path) {
    auto impl = std::make_unique<Impl>();
    impl->manifest = load_manifest(manifest_path);
    impl->file = std::make_unique<MappedFile>(bin_path);
    const auto& m = impl->manifest;
    const std::uint64_t stride = static_cast<std::uint64_t>(m.hidden_size) * sizeof(float);
    const std::uint64_t expected = m.records.size() * stride;
    if (impl->file->size() != expected)
        throw IoError("activation size mismatch for " + bin_path.string() + ": expected " +
                      std::to_string(expected) + " bytes (" + std::to_string(m.records.size()) +
                      " records x " + std::to_string(m.hidden_size) + " x 4), got " +
                      std::to_string(impl->file->size()));
    const std::size_t slots = std::size(kAllSites) * static_cast<std::size_t>(m.num_layers);
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        const auto& r = m.records[i];
        if (r.byte_offset + stride > expected)
            throw IoError("record " + std::to_string(i) + " offset beyond end of file");
        auto [it, inserted] = impl->index.try_emplace(r.question_id, slots, -1);
        if (inserted) impl->order.push_back(r.question_id);
        auto& slot = it->second[static_cast<std::size_t>(r.site) * m.num_layers + r.layer];
        if (slot >= 0)
            throw ValidationError("duplicate activation record for " + r.question_id + " " +
                                  std::string(to_string(r.site)) + " layer " +
                                  std::to_string(r.layer));
        slot = static_cast<std::int64_t>(i);
    }
    return ActivationStore(std::move(impl));
}

const ActivationManifest& ActivationStore::manifest() const noexcept { return impl_->manifest; }

const std::vector<std::string>& ActivationStore::question_ids() const noexcept {
    return impl_->order;
}

bool ActivationStore::contains(std::string_view qid, Site site, int layer) const {
    return impl_->find(qid, site, layer) >= 0;
}

bool ActivationStore::contains_question(std::string_view qid) const {
    return impl_->index.count(std::string(qid)) > 0;
}

std::span<const float> ActivationStore::lookup(std::string_view qid, Site site, int layer) const {
    const auto rec = impl_->find(qid, site, layer);
    if (rec < 0)
        throw NotFoundError("no activation for question '" + std::string(qid) + "' at " +
                            std::string(to_string(site)) + " layer " + std::to_string(layer));
    const auto& entry = impl_->manifest.records[static_cast<std::size_t>(rec)];
    const auto* base = reinterpret_cast<const float*>(impl_->file->data() + entry.byte_offset);
    return {base, static_cast<std::size_t>(impl_->manifest.hidden_size)};
}

// ---------------------------------------------------------------------------
// grouping and validation

std::vector<QuestionGroup> group_by_question(std::span<const Question> questions,
                                             std::span<const Generation> generations) {
    std::vector<QuestionGroup> groups(questions.size());
    std::unordered_map<std::string_view, std::size_t> pos;
    for (std::size_t i = 0; i < questions.size(); ++i) {
        groups[i].question = &questions[i];
        pos.emplace(questions[i].id, i);
    }
    for (const auto& g : generations) {
        auto it = pos.find(g.question_id);
        if (it == pos.end()) continue;
        auto& grp = groups[it->second];
        (g.mode == GenMode::Normal ? grp.normal : grp.uncertainty).push_back(&g);
    }
    auto by_index = [](const Generation* a, const Generation* b) { return a->index < b->index; };
    for (auto& grp : groups) {
        std::sort(grp.normal.begin(), grp.normal.end(), by_index);
        std::sort(grp.uncertainty.begin(), grp.uncertainty.end(), by_index);
    }
    return groups;
}

ValidationReport validate_corpus(std::span<const Question> questions,
                                 std::span<const Generation> generations, int k,
                                 const ActivationStore* activations,
                                 std::span<const GoldLabel> gold) {
    ValidationReport report;
    auto add = [&](std::string kind, std::string msg) {
        report.findings.push_back({std::move(kind), std::move(msg)});
    };

    std::unordered_set<std::string_view> ids;
    for (const auto& q : questions) {
        if (!ids.insert(q.id).second) add("duplicate_question", "duplicate question id " + q.id);
        if (!q.answer) add("missing_answer", "question " + q.id + " has no gold answer");
    }

    std::set<GenerationKey> gen_keys;
    std::map<std::string_view, int> normal_count;
    for (const auto& g : generations) {
        if (!gen_keys.insert(key_of(g)).second)
            add("duplicate_generation", "duplicate generation (" + g.question_id + ", " +
                                            std::string(to_string(g.mode)) + ", " +
                                            std::to_string(g.index) + ")");
        if (!ids.count(g.question_id)) {
            add("dangling_generation", "generation references unknown question " + g.question_id);
            continue;
        }
        if (g.mode == GenMode::Normal) {
            ++normal_count[g.question_id];
            if (g.index >= k)
                add("k_violation", "question " + g.question_id + " normal index " +
                                       std::to_string(g.index) + " >= k=" + std::to_string(k));
        }
    }
    for (const auto& q : questions) {
        const int n = normal_count.count(q.id) ? normal_count[q.id] : 0;
        if (n != k)
            add("k_violation", "question " + q.id + " has " + std::to_string(n) +
                                   " normal generations, expected " + std::to_string(k));
    }

    if (activations) {
        const auto& m = activations->manifest();
        for (const auto& q : questions) {
            if (!activations->contains_question(q.id)) {
                add("missing_activation", "no activations for question " + q.id);
                continue;
            }
            int missing = 0;
            for (Site s : m.sites)
                for (int l = 0; l < m.num_layers; ++l)
                    if (!activations->contains(q.id, s, l)) ++missing;
            if (missing)
                add("missing_activation", "question " + q.id + " lacks " +
                                              std::to_string(missing) + " (site, layer) records");
        }
        for (const auto& id : activations->question_ids())
            if (!ids.count(id)) add("dangling_activation", "activations for unknown question " + id);
    }

    for (const auto& l : gold)
        if (!gen_keys.count(l.generation) || !ids.count(l.generation.question_id))
            add("dangling_gold", "gold label references missing generation (" +
                                     l.generation.question_id + ", " +
                                     std::string(to_string(l.generation.mode)) + ", " +
                                     std::to_string(l.generation.index) + ")");
    return report;
}

}  // namespace dreamcatcher
