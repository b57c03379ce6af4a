use crate::config::{split_list, FlatConfig};
use crate::{Error, Result};

/// Names of the movable traffic-participant classes.
const MOVABLE: [&str; 4] = ["vehicle", "person", "two-wheel", "rider"];

/// Total mapping from raw 16-bit class ids to merged class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    names: Vec<String>,
    table: Vec<u16>,
    unlabeled: u16,
    static_classes: Vec<u16>,
}

impl ClassMap {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg = FlatConfig::parse(text)?;
        let names: Vec<String> = cfg
            .get("classes")
            .ok_or_else(|| Error::Config("class map has no `classes` line".into()))?
            .split_whitespace()
            .map(str::to_string)
            .collect();
        if names.is_empty() || names.len() > u16::MAX as usize {
            return Err(Error::Config("class map has no classes".into()));
        }
        let index_of = |name: &str| -> Result<u16> {
            names
                .iter()
                .position(|n| n == name)
                .map(|i| i as u16)
                .ok_or_else(|| Error::Config(format!("unknown merged class `{name}`")))
        };
        let unlabeled = index_of(cfg.get("unlabeled").unwrap_or("unlabeled"))?;
        let mut table = vec![unlabeled; 1 << 16];
        for (k, v) in cfg.iter() {
            if let Ok(raw) = k.parse::<u16>() {
                table[raw as usize] = index_of(v)?;
            } else if !matches!(k, "classes" | "unlabeled" | "static") {
                return Err(Error::Config(format!("unexpected class map key `{k}`")));
            }
        }
        let static_classes = match cfg.get("static") {
            Some(list) => split_list(list).map(index_of).collect::<Result<Vec<_>>>()?,
            None => (0..names.len() as u16)
                .filter(|&i| i != unlabeled && !MOVABLE.contains(&names[i as usize].as_str()))
                .collect(),
        };
        Ok(Self {
            names,
            table,
            unlabeled,
            static_classes,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// The 12-class SemanticKITTI merge.
    pub fn semantic_kitti() -> Self {
        Self::parse(include_str!("../../data/semantickitti12.classmap")).expect("builtin class map")
    }

    /// The 16-class nuScenes-lidarseg merge.
    pub fn nuscenes() -> Self {
        Self::parse(include_str!("../../data/nuscenes16.classmap")).expect("builtin class map")
    }

    /// Class set of the synthetic toy scenes.
    pub fn synthetic() -> Self {
        Self::parse(include_str!("../../data/synthetic.classmap")).expect("builtin class map")
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "semantickitti" | "semantickitti12" => Some(Self::semantic_kitti()),
            "nuscenes" | "nuscenes16" => Some(Self::nuscenes()),
            "synthetic" => Some(Self::synthetic()),
            _ => None,
        }
    }

    #[inline]
    pub fn remap(&self, raw: u16) -> u16 {
        self.table[raw as usize]
    }

    /// Merged class count, including the unlabeled class.
    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn unlabeled_index(&self) -> u16 {
        self.unlabeled
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, idx: u16) -> &str {
        &self.names[idx as usize]
    }

    pub fn index_of(&self, name: &str) -> Option<u16> {
        self.names.iter().position(|n| n == name).map(|i| i as u16)
    }

    pub fn static_classes(&self) -> &[u16] {
        &self.static_classes
    }

    /// Merged indices the network predicts, in channel order.
    pub fn supervised(&self) -> Vec<u16> {
        (0..self.names.len() as u16)
            .filter(|&i| i != self.unlabeled)
            .collect()
    }

    pub fn num_supervised(&self) -> usize {
        self.names.len() - 1
    }

    /// Network output channel of a merged class.
    pub fn channel_of(&self, idx: u16) -> Option<usize> {
        use std::cmp::Ordering::*;
        match idx.cmp(&self.unlabeled) {
            Less => Some(idx as usize),
            Equal => None,
            Greater => Some(idx as usize - 1),
        }
    }

    pub fn class_of_channel(&self, ch: usize) -> u16 {
        if ch < self.unlabeled as usize {
            ch as u16
        } else {
            ch as u16 + 1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kitti_merges_vehicles_and_two_wheels() {
        let m = ClassMap::semantic_kitti();
        assert_eq!(m.num_classes(), 13);
        let vehicle = m.index_of("vehicle").unwrap();
        for raw in [10, 18, 20] {
            assert_eq!(m.remap(raw), vehicle); // car, truck, other-vehicle
        }
        let two = m.index_of("two-wheel").unwrap();
        assert_eq!(m.remap(11), two);
        assert_eq!(m.remap(15), two);
        assert_eq!(m.remap(31), m.index_of("rider").unwrap());
        let obj = m.index_of("object").unwrap();
        for raw in [51, 80, 81] {
            assert_eq!(m.remap(raw), obj);
        }
        assert_eq!(m.remap(44), m.index_of("other-ground").unwrap());
        assert_eq!(m.remap(0), m.unlabeled_index());
    }

    #[test]
    fn remap_is_total() {
        for m in [ClassMap::semantic_kitti(), ClassMap::nuscenes(), ClassMap::synthetic()] {
            for raw in 0..=u16::MAX {
                assert!((m.remap(raw) as usize) < m.num_classes());
            }
        }
    }

    #[test]
    fn nuscenes_pedestrian_merge() {
        let m = ClassMap::nuscenes();
        assert_eq!(m.num_supervised(), 16);
        let ped = m.index_of("pedestrian").unwrap();
        for raw in [2, 3, 4, 6] {
            assert_eq!(m.remap(raw), ped);
        }
        assert_eq!(m.remap(15), m.remap(16));
    }

    #[test]
    fn channels_skip_unlabeled() {
        let m = ClassMap::parse("classes = a unl b c\nunlabeled = unl\n").unwrap();
        assert_eq!(m.channel_of(0), Some(0));
        assert_eq!(m.channel_of(1), None);
        assert_eq!(m.channel_of(3), Some(2));
        for ch in 0..3 {
            assert_eq!(m.channel_of(m.class_of_channel(ch)), Some(ch));
        }
    }

    #[test]
    fn default_static_set_excludes_traffic_participants() {
        let m = ClassMap::parse("classes = unlabeled vehicle road person\n").unwrap();
        assert_eq!(m.static_classes(), &[2]);
    }

    #[test]
    fn rejects_unknown_class_name() {
        assert!(ClassMap::parse("classes = unlabeled a\n7 = b\n").is_err());
    }
}
