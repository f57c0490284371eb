//! Group-label classifiers used by dataset filtering and protocol construction.

use image::RgbImage;

/// Maps an item to a 1-based group label in `1..=num_groups()`.
pub trait GroupClassifier<T: ?Sized = RgbImage> {
    fn num_groups(&self) -> u32;
    fn classify(&self, item: &T) -> u32;
}

/// Adapts a closure.
pub struct FnClassifier<F> {
    groups: u32,
    f: F,
}

impl<F> FnClassifier<F> {
    pub fn new(groups: u32, f: F) -> Self {
        FnClassifier { groups, f }
    }
}

impl<T: ?Sized, F: Fn(&T) -> u32> GroupClassifier<T> for FnClassifier<F> {
    fn num_groups(&self) -> u32 {
        self.groups
    }

    fn classify(&self, item: &T) -> u32 {
        (self.f)(item)
    }
}

/// Palette-based classifier for the procedural face generator.
pub struct PaletteClassifier;

impl GroupClassifier for PaletteClassifier {
    fn num_groups(&self) -> u32 {
        crate::synth::GROUP_COUNT
    }

    fn classify(&self, item: &RgbImage) -> u32 {
        crate::synth::palette_group(item)
    }
}
