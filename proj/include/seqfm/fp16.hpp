#pragma once

#include <cstdint>
#include <cstring>

#include "seqfm/common.hpp"

namespace seqfm {

// IEEE 754 binary16 conversions. Round-to-nearest-even on the way down,
// exact on the way up. Scales/biases of quantized rows are stored as these
// bit patterns.

inline u32 float_bits(float f) {
    u32 b;
    std::memcpy(&b, &f, sizeof(b));
    return b;
}

inline float bits_float(u32 b) {
    float f;
    std::memcpy(&f, &b, sizeof(f));
    return f;
}

inline u16 float_to_half(float f) {
    u32 x = float_bits(f);
    u32 sign = (x >> 16) & 0x8000u;
    u32 mant = x & 0x007fffffu;
    int exp = static_cast<int>((x >> 23) & 0xffu);

    if (exp == 255) { // inf / nan
        return static_cast<u16>(sign | 0x7c00u | (mant ? 0x0200u : 0u));
    }
    // rebase exponent: float bias 127 -> half bias 15
    int e = exp - 127 + 15;
    if (e >= 31) { // overflow -> inf
        return static_cast<u16>(sign | 0x7c00u);
    }
    if (e <= 0) { // subnormal half or zero
        if (e < -10) return static_cast<u16>(sign);
        // add implicit bit, shift into subnormal position
        mant |= 0x00800000u;
        int shift = 14 - e; // 14..24
        u32 half_mant = mant >> shift;
        u32 rem = mant & ((1u << shift) - 1);
        u32 halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half_mant & 1u))) half_mant++;
        return static_cast<u16>(sign | half_mant);
    }
    // normal: keep top 10 mantissa bits, round to nearest even
    u32 half_mant = mant >> 13;
    u32 rem = mant & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (half_mant & 1u))) {
        half_mant++;
        if (half_mant == 0x400u) { // mantissa overflow bumps exponent
            half_mant = 0;
            e++;
            if (e >= 31) return static_cast<u16>(sign | 0x7c00u);
        }
    }
    return static_cast<u16>(sign | (static_cast<u32>(e) << 10) | half_mant);
}

inline float half_to_float(u16 h) {
    u32 sign = (static_cast<u32>(h) & 0x8000u) << 16;
    u32 exp = (h >> 10) & 0x1fu;
    u32 mant = h & 0x3ffu;
    if (exp == 31) {
        return bits_float(sign | 0x7f800000u | (mant << 13));
    }
    if (exp == 0) {
        if (mant == 0) return bits_float(sign);
        // subnormal: normalize
        int e = -1;
        do {
            mant <<= 1;
            e++;
        } while ((mant & 0x400u) == 0);
        mant &= 0x3ffu;
        return bits_float(sign | ((112u - e) << 23) | (mant << 13));
    }
    return bits_float(sign | ((exp + 112u) << 23) | (mant << 13));
}

// Round a float through half precision.
inline float half_round(float f) { return half_to_float(float_to_half(f)); }

} // namespace seqfm
