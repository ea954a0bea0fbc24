#include "mim/kernels.h"

namespace mim::kern {
namespace {

const Ops* g_active = nullptr;

const Ops* pick_default() {
    if (const Ops* t = avx2_ops(); t && cpu_supports_avx2()) return t;
    return &scalar_ops();
}

}  // namespace

bool cpu_supports_avx2() {
#if defined(__x86_64__) || defined(__i386__)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

bool select(Backend b) {
    if (b == Backend::Avx2) {
        if (const Ops* t = avx2_ops(); t && cpu_supports_avx2()) {
            g_active = t;
            return true;
        }
        g_active = &scalar_ops();
        return false;
    }
    g_active = &scalar_ops();
    return true;
}

bool select_by_name(std::string_view name) {
    if (name == "scalar") return select(Backend::Scalar);
    if (name == "avx2") return select(Backend::Avx2);
    if (name == "auto") {
        g_active = pick_default();
        return true;
    }
    return false;
}

Backend active() {
    if (!g_active) g_active = pick_default();
    return g_active == &scalar_ops() ? Backend::Scalar : Backend::Avx2;
}

const Ops& ops() {
    if (!g_active) g_active = pick_default();
    return *g_active;
}

}  // namespace mim::kern
