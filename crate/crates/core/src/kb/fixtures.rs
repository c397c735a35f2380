//! Ready-made vocabularies for tests, demos and the synthetic generator.

use super::{ConceptId, KbBuilder, KbVersion};

const CPP_STUFF: [&str; 11] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
];
const CPP_THINGS: [&str; 8] = ["person", "rider", "car", "truck", "bus", "train", "motorcycle", "bicycle"];
pub const HUMAN_PARTS: [&str; 4] = ["torso", "head", "arm", "leg"];
pub const VEHICLE_PARTS: [&str; 5] = ["chassis", "window", "wheel", "light", "license plate"];

fn cpp(with_parts: &[&str]) -> KbVersion {
    let mut b = KbBuilder::new();
    for s in CPP_STUFF {
        b.child(ConceptId::SCENE, s, false);
    }
    for t in CPP_THINGS {
        let id = b.child(ConceptId::SCENE, t, true);
        if !with_parts.contains(&t) {
            continue;
        }
        let parts: &[&str] = if matches!(t, "person" | "rider") { &HUMAN_PARTS } else { &VEHICLE_PARTS };
        for p in parts {
            b.child(id, p, false);
        }
    }
    b.build().expect("fixture is valid").with_created_at(None)
}

/// Cityscapes-panoptic-parts style vocabulary: 19 scene-level classes
/// (8 countable), persons and riders with 4 parts, cars, trucks and buses
/// with 5 parts.
pub fn cpp_kb() -> KbVersion {
    cpp(&["person", "rider", "car", "truck", "bus"])
}

/// Same vocabulary with parts defined on car, person and rider only, the
/// starting point for copying vehicle parts onto other classes.
pub fn cpp_kb_compositional() -> KbVersion {
    cpp(&["person", "rider", "car"])
}
