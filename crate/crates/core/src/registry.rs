//! Named component lookup. Built once per job from the builtin set plus any
//! external-command backends declared in the config, then only read.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{JobConfig, Mode, OutputFormat, Params};
use crate::extractor::{CommandFactory, ExtractorFactory, SyntheticFactory};
use crate::geometry::Detection;
use crate::manifest::{self, DatasetAdapter};
use crate::mediaio::{self, CommandMediaBackend, Frame, MediaBackend, SyntheticMediaBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Dataset,
    Processor,
    Postprocessor,
    Exporter,
    Extractor,
    Mediaio,
    Detector,
}

impl Kind {
    pub const ALL: [Kind; 7] = [
        Kind::Dataset,
        Kind::Processor,
        Kind::Postprocessor,
        Kind::Exporter,
        Kind::Extractor,
        Kind::Mediaio,
        Kind::Detector,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Dataset => "dataset",
            Kind::Processor => "processor",
            Kind::Postprocessor => "postprocessor",
            Kind::Exporter => "exporter",
            Kind::Extractor => "extractor",
            Kind::Mediaio => "mediaio",
            Kind::Detector => "detector",
        }
    }

    pub fn parse(s: &str) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistryError {
    #[error("{kind} `{name}` is already registered")]
    DuplicateName { kind: Kind, name: String },
    #[error("unknown {kind} `{name}`; closest: [{}]", suggestions.join(", "))]
    UnknownName {
        kind: Kind,
        name: String,
        suggestions: Vec<String>,
    },
    #[error("component names must be non-empty")]
    EmptyName,
    #[error("a {got} component cannot be registered as {kind}")]
    KindMismatch { kind: Kind, got: Kind },
}

/// Finds people in sampled frames.
pub trait Detector: Send + Sync {
    fn detect(&self, frames: &[Frame], params: &Params) -> Result<Vec<Detection>, String>;
}

/// Reports the people scripted into synthetic media.
pub struct ScriptedDetector;

impl Detector for ScriptedDetector {
    fn detect(&self, frames: &[Frame], _params: &Params) -> Result<Vec<Detection>, String> {
        Ok(frames
            .iter()
            .flat_map(|f| {
                f.scripted.iter().map(move |p| Detection {
                    frame_index: f.index,
                    bbox: p.bbox,
                    score: p.score,
                })
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostprocessKind {
    /// Preset reduction, masking, normalization, flattening.
    Landmarks,
    /// Outputs carried forward unchanged.
    Passthrough,
}

/// A registered factory handle.
#[derive(Clone)]
pub enum Component {
    Dataset(Arc<dyn DatasetAdapter>),
    Processor(Mode),
    Postprocessor(PostprocessKind),
    Exporter(OutputFormat),
    Extractor(Arc<dyn ExtractorFactory>),
    Mediaio(Arc<dyn MediaBackend>),
    Detector(Arc<dyn Detector>),
}

impl Component {
    pub fn kind(&self) -> Kind {
        match self {
            Component::Dataset(_) => Kind::Dataset,
            Component::Processor(_) => Kind::Processor,
            Component::Postprocessor(_) => Kind::Postprocessor,
            Component::Exporter(_) => Kind::Exporter,
            Component::Extractor(_) => Kind::Extractor,
            Component::Mediaio(_) => Kind::Mediaio,
            Component::Detector(_) => Kind::Detector,
        }
    }
}

impl fmt::Debug for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Component({})", self.kind())
    }
}

/// Up to three registered names closest to `name` by edit distance, ties
/// broken lexicographically.
pub fn closest<'a>(name: &str, candidates: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut scored: Vec<(usize, &str)> = candidates
        .into_iter()
        .map(|c| (strsim::levenshtein(name, c), c))
        .collect();
    scored.sort();
    scored.into_iter().take(3).map(|(_, c)| c.to_string()).collect()
}

#[derive(Default, Clone)]
pub struct Registry {
    entries: BTreeMap<(Kind, String), Component>,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    pub fn register(&mut self, kind: Kind, name: &str, component: Component) -> Result<(), RegistryError> {
        if name.is_empty() {
            return Err(RegistryError::EmptyName);
        }
        if component.kind() != kind {
            return Err(RegistryError::KindMismatch {
                kind,
                got: component.kind(),
            });
        }
        let key = (kind, name.to_string());
        if self.entries.contains_key(&key) {
            return Err(RegistryError::DuplicateName {
                kind,
                name: name.to_string(),
            });
        }
        self.entries.insert(key, component);
        Ok(())
    }

    pub fn resolve(&self, kind: Kind, name: &str) -> Result<&Component, RegistryError> {
        self.entries
            .get(&(kind, name.to_string()))
            .ok_or_else(|| RegistryError::UnknownName {
                kind,
                name: name.to_string(),
                suggestions: closest(name, self.names(kind)),
            })
    }

    fn names(&self, kind: Kind) -> impl Iterator<Item = &str> {
        self.entries
            .keys()
            .filter(move |(k, _)| *k == kind)
            .map(|(_, n)| n.as_str())
    }

    /// Sorted, duplicate-free names of one kind.
    pub fn list(&self, kind: Kind) -> Vec<String> {
        self.names(kind).map(str::to_string).collect()
    }

    pub fn dataset(&self, name: &str) -> Result<Arc<dyn DatasetAdapter>, RegistryError> {
        match self.resolve(Kind::Dataset, name)? {
            Component::Dataset(a) => Ok(Arc::clone(a)),
            _ => unreachable!("kind checked at registration"),
        }
    }

    pub fn extractor(&self, name: &str) -> Result<Arc<dyn ExtractorFactory>, RegistryError> {
        match self.resolve(Kind::Extractor, name)? {
            Component::Extractor(f) => Ok(Arc::clone(f)),
            _ => unreachable!("kind checked at registration"),
        }
    }

    pub fn mediaio(&self, name: &str) -> Result<Arc<dyn MediaBackend>, RegistryError> {
        match self.resolve(Kind::Mediaio, name)? {
            Component::Mediaio(m) => Ok(Arc::clone(m)),
            _ => unreachable!("kind checked at registration"),
        }
    }

    pub fn detector(&self, name: &str) -> Result<Arc<dyn Detector>, RegistryError> {
        match self.resolve(Kind::Detector, name)? {
            Component::Detector(d) => Ok(Arc::clone(d)),
            _ => unreachable!("kind checked at registration"),
        }
    }

    pub fn processor(&self, name: &str) -> Result<Mode, RegistryError> {
        match self.resolve(Kind::Processor, name)? {
            Component::Processor(m) => Ok(*m),
            _ => unreachable!("kind checked at registration"),
        }
    }

    pub fn postprocessor(&self, name: &str) -> Result<PostprocessKind, RegistryError> {
        match self.resolve(Kind::Postprocessor, name)? {
            Component::Postprocessor(p) => Ok(*p),
            _ => unreachable!("kind checked at registration"),
        }
    }

    pub fn exporter(&self, name: &str) -> Result<OutputFormat, RegistryError> {
        match self.resolve(Kind::Exporter, name)? {
            Component::Exporter(f) => Ok(*f),
            _ => unreachable!("kind checked at registration"),
        }
    }

    /// Everything that ships with the engine.
    pub fn builtin() -> Self {
        let mut r = Registry::new();
        for name in manifest::BUILTIN_ADAPTERS {
            let adapter: Arc<dyn DatasetAdapter> = Arc::from(manifest::builtin_adapter(name).expect("builtin"));
            r.register(Kind::Dataset, name, Component::Dataset(adapter))
                .expect("unique");
        }
        r.register(Kind::Processor, "pose", Component::Processor(Mode::Pose))
            .expect("unique");
        r.register(Kind::Processor, "video", Component::Processor(Mode::Video))
            .expect("unique");
        r.register(
            Kind::Postprocessor,
            "landmarks",
            Component::Postprocessor(PostprocessKind::Landmarks),
        )
        .expect("unique");
        r.register(
            Kind::Postprocessor,
            "passthrough",
            Component::Postprocessor(PostprocessKind::Passthrough),
        )
        .expect("unique");
        r.register(
            Kind::Exporter,
            "webdataset",
            Component::Exporter(OutputFormat::Webdataset),
        )
        .expect("unique");
        r.register(
            Kind::Extractor,
            "synthetic",
            Component::Extractor(Arc::new(SyntheticFactory)),
        )
        .expect("unique");
        r.register(
            Kind::Mediaio,
            "synthetic",
            Component::Mediaio(Arc::new(SyntheticMediaBackend)),
        )
        .expect("unique");
        r.register(
            Kind::Mediaio,
            "command",
            Component::Mediaio(Arc::new(CommandMediaBackend::default())),
        )
        .expect("unique");
        r.register(
            Kind::Detector,
            "scripted",
            Component::Detector(Arc::new(ScriptedDetector)),
        )
        .expect("unique");
        r
    }

    /// Builtins plus the job's external-command backends. A configured media
    /// command template replaces the default `command` media backend.
    pub fn for_job(config: &JobConfig) -> Result<Self, RegistryError> {
        let mut r = Registry::builtin();
        if let Some(ex) = &config.processing.extractor {
            if let Some(argv) = &ex.command {
                r.register(
                    Kind::Extractor,
                    &ex.backend_name,
                    Component::Extractor(Arc::new(CommandFactory { argv: argv.clone() })),
                )?;
            }
        }
        let media = &config.processing.media;
        if media.probe_command.is_some() || media.render_command.is_some() {
            let backend = CommandMediaBackend {
                probe_command: media
                    .probe_command
                    .clone()
                    .unwrap_or_else(mediaio::default_probe_command),
                render_command: media
                    .render_command
                    .clone()
                    .unwrap_or_else(mediaio::default_render_command),
            };
            r.entries
                .insert((Kind::Mediaio, "command".into()), Component::Mediaio(Arc::new(backend)));
        }
        Ok(r)
    }
}
