#include <moelab/trace.hpp>

#include <cstdio>
#include <cstring>
#include <memory>

namespace moelab {

namespace {

constexpr char kMagic[4] = { 'M', 'O', 'E', 'T' };

struct FileCloser {
    void operator()(std::FILE *f) const
    {
        if (f)
            std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void put_u32(std::FILE *f, std::uint32_t v)
{
    unsigned char b[4] = { static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                           static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24) };
    std::fwrite(b, 1, 4, f);
}

void put_u16(std::FILE *f, std::uint16_t v)
{
    unsigned char b[2] = { static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8) };
    std::fwrite(b, 1, 2, f);
}

void put_f32(std::FILE *f, float v)
{
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(f, bits);
}

std::uint32_t get_u32(std::FILE *f, const std::string &path)
{
    unsigned char b[4];
    require(std::fread(b, 1, 4, f) == 4, "truncated trace file: " + path);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint16_t get_u16(std::FILE *f, const std::string &path)
{
    unsigned char b[2];
    require(std::fread(b, 1, 2, f) == 2, "truncated trace file: " + path);
    return static_cast<std::uint16_t>(static_cast<std::uint16_t>(b[0]) | (static_cast<std::uint16_t>(b[1]) << 8));
}

float get_f32(std::FILE *f, const std::string &path)
{
    const std::uint32_t bits = get_u32(f, path);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

} // namespace

void RoutingTrace::append_step(std::vector<std::vector<Entry>> step)
{
    require(step.size() == layers, "trace step must cover every layer");
    for (const auto &layer : step) {
        require(layer.size() == batch, "trace step layer must cover every token");
        for (const auto &e : layer) {
            require(e.active.size() == top_k, "trace entry must list top_k experts");
            require(e.scores.size() == experts, "trace entry must carry all expert scores");
            for (std::uint16_t a : e.active)
                require(a < experts, "trace active expert out of range");
        }
    }
    steps.push_back(std::move(step));
}

void write_trace(const RoutingTrace &trace, const std::string &path)
{
    FilePtr f(std::fopen(path.c_str(), "wb"));
    require(f != nullptr, "cannot open trace file for writing: " + path);
    std::fwrite(kMagic, 1, 4, f.get());
    put_u32(f.get(), RoutingTrace::kVersion);
    put_u32(f.get(), trace.batch);
    put_u32(f.get(), trace.layers);
    put_u32(f.get(), trace.experts);
    put_u32(f.get(), trace.top_k);
    for (const auto &step : trace.steps)
        for (const auto &layer : step)
            for (const auto &e : layer) {
                put_u32(f.get(), e.token_id);
                for (std::uint16_t a : e.active)
                    put_u16(f.get(), a);
                for (float s : e.scores)
                    put_f32(f.get(), s);
            }
    require(std::ferror(f.get()) == 0, "write failure on trace file: " + path);
}

RoutingTrace read_trace(const std::string &path)
{
    FilePtr f(std::fopen(path.c_str(), "rb"));
    require(f != nullptr, "cannot open trace file: " + path);

    char magic[4];
    require(std::fread(magic, 1, 4, f.get()) == 4 && std::memcmp(magic, kMagic, 4) == 0,
            "bad magic in trace file: " + path);
    const std::uint32_t version = get_u32(f.get(), path);
    require(version == RoutingTrace::kVersion,
            "unsupported trace version " + std::to_string(version) + " in " + path);

    RoutingTrace trace;
    trace.batch = get_u32(f.get(), path);
    trace.layers = get_u32(f.get(), path);
    trace.experts = get_u32(f.get(), path);
    trace.top_k = get_u32(f.get(), path);
    require(trace.batch > 0 && trace.layers > 0 && trace.experts > 0 && trace.top_k > 0 &&
                    trace.top_k <= trace.experts,
            "invalid trace header in " + path);

    while (true) {
        // probe for another step
        const int probe = std::fgetc(f.get());
        if (probe == EOF)
            break;
        std::ungetc(probe, f.get());

        std::vector<std::vector<RoutingTrace::Entry>> step(trace.layers);
        for (auto &layer : step) {
            layer.resize(trace.batch);
            for (auto &e : layer) {
                e.token_id = get_u32(f.get(), path);
                e.active.resize(trace.top_k);
                for (auto &a : e.active) {
                    a = get_u16(f.get(), path);
                    require(a < trace.experts, "trace active expert out of range in " + path);
                }
                e.scores.resize(trace.experts);
                for (auto &s : e.scores)
                    s = get_f32(f.get(), path);
            }
        }
        trace.steps.push_back(std::move(step));
    }
    require(!trace.steps.empty(), "trace file has no steps: " + path);
    return trace;
}

} // namespace moelab
