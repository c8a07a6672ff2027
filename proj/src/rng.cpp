#include "dacnet/rng.hpp"

#include <sstream>

namespace dacnet {

std::string Rng::serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::deserialize(const std::string& text) {
    std::istringstream is(text);
    is >> engine_;
}

uint64_t mix_seed(uint64_t base, uint64_t tag) {
    // splitmix64 finalizer over the combined value
    uint64_t z = base + 0x9e3779b97f4a7c15ULL + tag * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

uint64_t hash_tag(const std::string& tag) {
    uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char ch : tag) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace dacnet
