// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "diffora/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "diffora/errors.hpp"
#include "diffora/io.hpp"

namespace diffora {

namespace {

constexpr char kMagic[4] = {'D', 'F', 'R', 'A'};

class Writer {
public:
    void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
    void uint(std::uint64_t v, int bytes) {
        for (int i = 0; i < bytes; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
    }
    void u16(std::uint16_t v) { uint(v, 2); }
    void u32(std::uint32_t v) { uint(v, 4); }
    void u64(std::uint64_t v) { uint(v, 8); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void bytes(std::string_view s) { out_.append(s); }
    void matrix(const Matrix& m) {
        u64(m.rows());
        u64(m.cols());
        for (double v : m.data()) f64(v);
    }
    void section(Section id, const std::string& payload) {
        u8(static_cast<std::uint8_t>(id));
        u64(payload.size());
        bytes(payload);
    }
    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class Reader {
public:
    explicit Reader(std::string_view in) : in_(in) {}

    bool done() const { return pos_ == in_.size(); }
    std::uint64_t uint(int bytes) {
        need(static_cast<std::size_t>(bytes));
        std::uint64_t v = 0;
        for (int i = 0; i < bytes; ++i) v |= std::uint64_t(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
        pos_ += static_cast<std::size_t>(bytes);
        return v;
    }
    std::uint8_t u8() { return static_cast<std::uint8_t>(uint(1)); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(uint(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
    std::uint64_t u64() { return uint(8); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string_view bytes(std::size_t n) {
        need(n);
        auto s = in_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    Matrix matrix() {
        const std::uint64_t r = u64();
        const std::uint64_t c = u64();
        if (r != 0 && c > (in_.size() - pos_) / 8 / r) throw Error(ErrorKind::io, "checkpoint matrix is truncated");
        Matrix m(r, c);
        for (double& v : m.data()) v = f64();
        return m;
    }

private:
    void need(std::size_t n) const {
        if (in_.size() - pos_ < n) throw Error(ErrorKind::io, "checkpoint is truncated");
    }
    std::string_view in_;
    std::size_t pos_ = 0;
};

Family family_at(std::uint8_t v) {
    if (v >= kFamilyCount) throw Error(ErrorKind::io, "checkpoint names an unknown module family");
    return kFamilies[v];
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
    Writer w;
    w.bytes(std::string_view(kMagic, 4));
    w.u16(kCheckpointVersion);
    w.section(Section::config, ckpt.config_text);

    Writer dam;
    dam.f64(ckpt.dam.rho);
    dam.u64(ckpt.dam.k);
    dam.matrix(ckpt.dam.logits);
    dam.u8(ckpt.dam.gamma_bin ? 1 : 0);
    if (ckpt.dam.gamma_bin) dam.matrix(*ckpt.dam.gamma_bin);
    w.section(Section::dam, dam.take());

    Writer ad;
    ad.u64(ckpt.adapters.size());
    for (const AdapterRecord& rec : ckpt.adapters) {
        ad.u32(rec.layer);
        ad.u8(static_cast<std::uint8_t>(index_of(rec.family)));
        ad.u64(rec.adapter.rank);
        ad.f64(rec.adapter.alpha);
        ad.f64(rec.adapter.dropout_p);
        ad.matrix(rec.adapter.a);
        ad.matrix(rec.adapter.b);
    }
    ad.u64(ckpt.shared_slots.size());
    for (const auto& [layer, family] : ckpt.shared_slots) {
        ad.u32(layer);
        ad.u8(static_cast<std::uint8_t>(index_of(family)));
    }
    w.section(Section::adapters, ad.take());
    return w.take();
}

Checkpoint decode_checkpoint(const std::string& bytes) {
    Reader r(bytes);
    if (r.bytes(4) != std::string_view(kMagic, 4)) throw Error(ErrorKind::io, "not a DFRA checkpoint");
    const std::uint16_t version = r.u16();
    if (version != kCheckpointVersion) {
        throw Error(ErrorKind::io, "unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint ckpt;
    bool seen_config = false, seen_dam = false;
    while (!r.done()) {
        const std::uint8_t id = r.u8();
        const std::uint64_t len = r.u64();
        Reader s(r.bytes(len));
        switch (static_cast<Section>(id)) {
            case Section::config:
                ckpt.config_text = std::string(s.bytes(len));
                seen_config = true;
                break;
            case Section::dam: {
                ckpt.dam.rho = s.f64();
                ckpt.dam.k = s.u64();
                ckpt.dam.logits = s.matrix();
                ckpt.dam.gamma_bar = gamma_from_logits(ckpt.dam.logits);
                if (s.u8() != 0) ckpt.dam.gamma_bin = s.matrix();
                seen_dam = true;
                break;
            }
            case Section::adapters: {
                const std::uint64_t count = s.u64();
                for (std::uint64_t i = 0; i < count; ++i) {
                    AdapterRecord rec;
                    rec.layer = s.u32();
                    rec.family = family_at(s.u8());
                    rec.adapter.rank = s.u64();
                    rec.adapter.alpha = s.f64();
                    rec.adapter.dropout_p = s.f64();
                    rec.adapter.a = s.matrix();
                    rec.adapter.b = s.matrix();
                    ckpt.adapters.push_back(std::move(rec));
                }
                const std::uint64_t slots = s.u64();
                for (std::uint64_t i = 0; i < slots; ++i) {
                    const std::uint32_t layer = s.u32();
                    ckpt.shared_slots.emplace_back(layer, family_at(s.u8()));
                }
                break;
            }
            default:
                break;  // unknown sections are skipped
        }
    }
    if (!seen_config || !seen_dam) throw Error(ErrorKind::io, "checkpoint lacks a config or DAM section");
    return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    atomic_write(path, encode_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

Checkpoint snapshot(const std::string& config_text, const DamState& dam, const ModularNet& net) {
    Checkpoint ckpt;
    ckpt.config_text = config_text;
    ckpt.dam = dam;
    for (std::size_t l = 0; l < net.layer_count(); ++l) {
        for (Family f : kFamilies) {
            const ModuleRecord& rec = net.module(l, f);
            if (rec.slot == SlotKind::own) ckpt.adapters.push_back({static_cast<std::uint32_t>(l), f, rec.own});
            if (rec.slot == SlotKind::shared) ckpt.shared_slots.emplace_back(static_cast<std::uint32_t>(l), f);
        }
    }
    for (const auto& [f, adapter] : net.bank().entries()) ckpt.adapters.push_back({kBankLayer, f, adapter});
    return ckpt;
}

void restore_adapters(const Checkpoint& ckpt, ModularNet& net) {
    net.bank() = SharedAdapterBank{};
    for (std::size_t l = 0; l < net.layer_count(); ++l)
        for (Family f : kFamilies) net.clear_adapter(l, f);
    for (const AdapterRecord& rec : ckpt.adapters) {
        if (rec.layer == kBankLayer) {
            net.bank().put(rec.family, rec.adapter);
        } else {
            if (rec.layer >= net.layer_count()) throw Error(ErrorKind::io, "checkpoint adapter layer out of range");
            net.set_own(rec.layer, rec.family, rec.adapter);
        }
    }
    for (const auto& [layer, family] : ckpt.shared_slots) {
        if (layer >= net.layer_count()) throw Error(ErrorKind::io, "checkpoint shared slot out of range");
        net.set_shared(layer, family);
    }
}

}  // namespace diffora
