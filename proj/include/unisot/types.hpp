#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

namespace unisot {

// How the target is specified.
enum class ReferenceModality { BBOX, NL, NL_BBOX };

// Sensor stream. RGB is the base; the others are auxiliary ("X").
enum class VideoModality { RGB, DEPTH, THERMAL, EVENT };

inline const char* to_string(ReferenceModality r) {
    switch (r) {
        case ReferenceModality::BBOX: return "bbox";
        case ReferenceModality::NL: return "nl";
        case ReferenceModality::NL_BBOX: return "nl+bbox";
    }
    return "?";
}

inline const char* to_string(VideoModality m) {
    switch (m) {
        case VideoModality::RGB: return "rgb";
        case VideoModality::DEPTH: return "depth";
        case VideoModality::THERMAL: return "thermal";
        case VideoModality::EVENT: return "event";
    }
    return "?";
}

inline ReferenceModality reference_from_string(const std::string& s) {
    if (s == "bbox") return ReferenceModality::BBOX;
    if (s == "nl") return ReferenceModality::NL;
    if (s == "nl+bbox" || s == "nlbbox") return ReferenceModality::NL_BBOX;
    throw std::invalid_argument("unknown reference modality: " + s);
}

constexpr std::array<VideoModality, 4> kVideoModalities = {
    VideoModality::RGB, VideoModality::DEPTH, VideoModality::THERMAL, VideoModality::EVENT};

inline int modality_index(VideoModality m) { return static_cast<int>(m); }

// Axis-aligned box, center + extent, in pixels.
struct Box {
    double cx = 0, cy = 0, w = 0, h = 0;

    double x1() const { return cx - w / 2; }
    double y1() const { return cy - h / 2; }
    double x2() const { return cx + w / 2; }
    double y2() const { return cy + h / 2; }
    double area() const { return w * h; }

    static Box from_corners(double x1, double y1, double x2, double y2) {
        return Box{(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1};
    }

    bool contains(double px, double py) const {
        return px >= x1() && px <= x2() && py >= y1() && py <= y2();
    }
};

inline double iou(const Box& a, const Box& b) {
    double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
    double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
    if (iw <= 0 || ih <= 0) return 0.0;
    double inter = iw * ih;
    double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

}  // namespace unisot
