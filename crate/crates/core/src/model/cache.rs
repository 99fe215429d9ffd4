//! Append-only per-layer key/value cache with length query and crop.

use super::ModelError;

/// One recorded mutation of a cache slot (audit mode only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheEvent {
    Append { count: usize },
    Crop { from: usize, to: usize },
}

/// Keys and values cached for a single layer. Rows are post-rotary keys and
/// values, `width = n_heads * head_dim` floats each.
#[derive(Debug, Clone)]
pub struct KvSlot {
    layer: usize,
    width: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
    audit: Option<Vec<CacheEvent>>,
    crop_disabled: bool,
}

impl KvSlot {
    fn new(layer: usize, width: usize) -> Self {
        Self {
            layer,
            width,
            keys: Vec::new(),
            values: Vec::new(),
            audit: None,
            crop_disabled: false,
        }
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.width.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, pos: usize) -> &[f32] {
        &self.keys[pos * self.width..(pos + 1) * self.width]
    }

    pub fn value(&self, pos: usize) -> &[f32] {
        &self.values[pos * self.width..(pos + 1) * self.width]
    }

    pub(crate) fn all_keys(&self) -> &[f32] {
        &self.keys
    }

    pub(crate) fn all_values(&self) -> &[f32] {
        &self.values
    }

    /// Appends `keys.len() / width` rows. There is no overwrite mode.
    pub fn append(&mut self, keys: &[f32], values: &[f32]) {
        assert_eq!(keys.len(), values.len(), "key/value row count differs");
        assert_eq!(keys.len() % self.width.max(1), 0, "partial cache row");
        self.keys.extend_from_slice(keys);
        self.values.extend_from_slice(values);
        if let Some(log) = &mut self.audit {
            log.push(CacheEvent::Append {
                count: keys.len() / self.width.max(1),
            });
        }
    }

    /// Truncates to exactly `len` entries, keeping the oldest in order.
    pub fn crop(&mut self, len: usize) -> Result<(), ModelError> {
        let current = self.len();
        if len > current {
            return Err(ModelError::CropBeyondLength {
                layer: self.layer,
                requested: len,
                len: current,
            });
        }
        if self.crop_disabled {
            return Ok(());
        }
        self.keys.truncate(len * self.width);
        self.values.truncate(len * self.width);
        if let Some(log) = &mut self.audit {
            log.push(CacheEvent::Crop {
                from: current,
                to: len,
            });
        }
        Ok(())
    }
}

/// Per-layer KV cache for one decoding session.
#[derive(Debug, Clone)]
pub struct KvCache {
    slots: Vec<KvSlot>,
}

impl KvCache {
    pub fn new(n_layers: usize, width: usize) -> Self {
        Self {
            slots: (0..n_layers).map(|i| KvSlot::new(i, width)).collect(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self, layer: usize) -> usize {
        self.slots[layer].len()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.slots.iter().map(KvSlot::len).collect()
    }

    pub fn slot(&self, layer: usize) -> &KvSlot {
        &self.slots[layer]
    }

    pub fn slot_mut(&mut self, layer: usize) -> &mut KvSlot {
        &mut self.slots[layer]
    }

    pub fn crop(&mut self, layer: usize, len: usize) -> Result<(), ModelError> {
        self.slots[layer].crop(len)
    }

    /// Starts recording every append and crop.
    pub fn enable_audit(&mut self) {
        for s in &mut self.slots {
            s.audit.get_or_insert_with(Vec::new);
        }
    }

    /// Returns and clears the recorded events of each layer.
    pub fn drain_events(&mut self) -> Vec<Vec<CacheEvent>> {
        self.slots
            .iter_mut()
            .map(|s| s.audit.as_mut().map(std::mem::take).unwrap_or_default())
            .collect()
    }

    /// Test hook: make `crop` a silent no-op, breaking the decode protocol.
    #[doc(hidden)]
    pub fn set_crop_disabled(&mut self, disabled: bool) {
        for s in &mut self.slots {
            s.crop_disabled = disabled;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn crop_beyond_length_is_rejected() {
        let mut c = KvCache::new(1, 2);
        c.slot_mut(0).append(&[1.0, 2.0], &[3.0, 4.0]);
        assert!(c.crop(0, 2).is_err());
        assert!(c.crop(0, 1).is_ok());
    }

    #[test]
    fn audit_records_events() {
        let mut c = KvCache::new(2, 1);
        c.enable_audit();
        c.slot_mut(1).append(&[1.0, 2.0], &[1.0, 2.0]);
        c.crop(1, 1).unwrap();
        let ev = c.drain_events();
        assert!(ev[0].is_empty());
        assert_eq!(
            ev[1],
            vec![
                CacheEvent::Append { count: 2 },
                CacheEvent::Crop { from: 2, to: 1 }
            ]
        );
        assert!(c.drain_events()[1].is_empty());
    }

    #[test]
    fn disabled_crop_keeps_entries() {
        let mut c = KvCache::new(1, 1);
        c.slot_mut(0).append(&[1.0, 2.0], &[1.0, 2.0]);
        c.set_crop_disabled(true);
        c.crop(0, 0).unwrap();
        assert_eq!(c.len(0), 2);
    }

    proptest! {
        #[test]
        fn crop_keeps_prefix_in_order(n in 0usize..20, keep in 0usize..20) {
            let keep = keep.min(n);
            let mut c = KvCache::new(1, 3);
            for i in 0..n {
                let row = [i as f32, i as f32 + 0.5, -(i as f32)];
                c.slot_mut(0).append(&row, &row);
            }
            c.crop(0, keep).unwrap();
            prop_assert_eq!(c.len(0), keep);
            for i in 0..keep {
                prop_assert_eq!(c.slot(0).key(i)[0], i as f32);
                prop_assert_eq!(c.slot(0).value(i)[2], -(i as f32));
            }
        }
    }
}
