//! Built-in applicator catalog.

use brachy_core::mesh::{make_template, TemplateModel, TemplateSpec};
use serde::Serialize;
use std::collections::BTreeMap;
use std::sync::Arc;

#[derive(Debug, Clone, Serialize)]
pub struct DeviceInfo {
    pub id: String,
    pub rows: usize,
    pub cols: usize,
    pub pitch_mm: f64,
    pub holes: usize,
}

#[derive(Debug, Clone)]
pub struct DeviceCatalog {
    models: BTreeMap<String, (TemplateSpec, Arc<TemplateModel>)>,
}

impl DeviceCatalog {
    pub fn from_specs(specs: impl IntoIterator<Item = TemplateSpec>) -> Self {
        let models = specs
            .into_iter()
            .map(|s| {
                let m = make_template(&s).expect("catalog template specs are valid");
                (s.name.clone(), (s, Arc::new(m)))
            })
            .collect();
        DeviceCatalog { models }
    }

    pub fn get(&self, id: &str) -> Option<Arc<TemplateModel>> {
        self.models.get(id).map(|(_, m)| m.clone())
    }

    pub fn list(&self) -> Vec<DeviceInfo> {
        self.models
            .values()
            .map(|(s, m)| DeviceInfo { id: m.name.clone(), rows: s.rows, cols: s.cols, pitch_mm: s.pitch, holes: m.holes.len() })
            .collect()
    }
}

impl Default for DeviceCatalog {
    /// A 6×6 template at 10 mm pitch and a denser 6×6 at 5 mm.
    fn default() -> Self {
        DeviceCatalog::from_specs([
            TemplateSpec::default(),
            TemplateSpec { name: "template-6x6-fine".into(), pitch: 5.0, ..TemplateSpec::default() },
        ])
    }
}
