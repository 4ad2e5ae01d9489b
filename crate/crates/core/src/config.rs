//! Model dimensions and the flat `key = value` configuration format.
//!
//! Config files hold one `key = value` pair per line; `#` starts a comment.
//! Unknown keys are rejected so typos surface as errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scene_synth::{RayPatternConfig, SceneConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryInit {
    MaxPool,
    MeanPool,
    AttentionPool,
    Random,
}

/// Analytic surface added to the SDF head output, so an untrained head
/// already renders a plausible scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SdfPrior {
    /// `r − depth`: a sphere half-way through the depth range.
    Sphere,
    /// `z + sensor_height`: the flat ground below the sensor.
    Ground,
    None,
}

impl SdfPrior {
    pub fn name(self) -> &'static str {
        match self {
            SdfPrior::Sphere => "sphere",
            SdfPrior::Ground => "ground",
            SdfPrior::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "sphere" => SdfPrior::Sphere,
            "ground" => SdfPrior::Ground,
            "none" => SdfPrior::None,
            _ => return None,
        })
    }
}

impl QueryInit {
    pub fn name(self) -> &'static str {
        match self {
            QueryInit::MaxPool => "max",
            QueryInit::MeanPool => "mean",
            QueryInit::AttentionPool => "attention",
            QueryInit::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "max" => QueryInit::MaxPool,
            "mean" => QueryInit::MeanPool,
            "attention" => QueryInit::AttentionPool,
            "random" => QueryInit::Random,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    // BEV tokenizer
    pub bev_w: usize,
    pub bev_c: usize,
    pub height_anchors: Vec<f64>,
    /// Half-width of the BEV square, metres.
    pub extent: f64,
    pub cam_width: usize,
    pub cam_height: usize,
    // language core
    pub llm_dim: usize,
    pub llm_layers: usize,
    pub llm_heads: usize,
    pub context: usize,
    pub horizon: usize,
    pub queries_per_step: usize,
    pub pooled_text: usize,
    pub query_init: QueryInit,
    // current-to-future link
    pub link_blocks: usize,
    pub link_heads: usize,
    pub link_enabled: bool,
    pub textual_injection: bool,
    pub ego_modulation: bool,
    pub modulation_hidden: usize,
    // render
    pub vol_z: usize,
    pub vol_c: usize,
    pub z_range: (f64, f64),
    pub sdf_hidden: usize,
    pub samples_per_ray: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub tau_init: f64,
    pub sdf_prior: SdfPrior,
    pub weight_threshold: f64,
    // geometry extractor
    pub extractor_width: usize,
    // sensors
    pub lidar: RayPatternConfig,
}

impl ModelConfig {
    /// Default desk-scale model.
    pub fn desk() -> Self {
        Self {
            bev_w: 40,
            bev_c: 32,
            height_anchors: vec![-1.0, 0.0, 1.0, 2.0],
            extent: 32.0,
            cam_width: 64,
            cam_height: 24,
            llm_dim: 128,
            llm_layers: 4,
            llm_heads: 4,
            context: 512,
            horizon: 3,
            queries_per_step: 4,
            pooled_text: 4,
            query_init: QueryInit::MaxPool,
            sdf_prior: SdfPrior::None,
            link_blocks: 6,
            link_heads: 4,
            link_enabled: true,
            textual_injection: true,
            ego_modulation: true,
            modulation_hidden: 64,
            vol_z: 8,
            vol_c: 8,
            z_range: (-1.5, 2.5),
            sdf_hidden: 32,
            samples_per_ray: 48,
            depth_min: 0.5,
            depth_max: 32.0,
            tau_init: 10.0,
            weight_threshold: 0.5,
            extractor_width: 16,
            lidar: RayPatternConfig::default(),
        }
    }

    /// Reduced model used by the test-suite training runs.
    pub fn ci() -> Self {
        Self {
            bev_w: 16,
            bev_c: 8,
            extent: 16.0,
            cam_width: 32,
            cam_height: 12,
            llm_dim: 32,
            llm_layers: 2,
            llm_heads: 2,
            context: 128,
            link_blocks: 2,
            link_heads: 2,
            modulation_hidden: 16,
            vol_z: 4,
            vol_c: 4,
            z_range: (-1.5, 2.5),
            sdf_hidden: 16,
            samples_per_ray: 24,
            depth_max: 16.0,
            extractor_width: 8,
            lidar: RayPatternConfig {
                elevation_steps: 8,
                azimuth_steps: 64,
                elevation_min_deg: -30.0,
                elevation_max_deg: 10.0,
                max_range: 16.0,
                sensor_height: 1.0,
            },
            ..Self::desk()
        }
    }

    pub fn cell_size(&self) -> f64 {
        2.0 * self.extent / self.bev_w as f64
    }

    pub fn compressed_w(&self) -> usize {
        self.bev_w / 4
    }

    pub fn bev_tokens(&self) -> usize {
        self.compressed_w() * self.compressed_w()
    }

    pub fn query_tokens(&self) -> usize {
        self.horizon * self.queries_per_step
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.bev_w == 0 || self.bev_w % 4 != 0 {
            return fail(format!("bev.w = {} must be a positive multiple of 4", self.bev_w));
        }
        if self.height_anchors.is_empty() {
            return fail("bev.height_anchors must not be empty".into());
        }
        if self.llm_dim % self.llm_heads != 0 || self.llm_dim % self.link_heads != 0 {
            return fail("llm.dim must be divisible by the head counts".into());
        }
        if self.horizon == 0 || self.queries_per_step == 0 || self.pooled_text == 0 {
            return fail("horizon, query count and pooled text count must be positive".into());
        }
        if self.samples_per_ray < 2 {
            return fail("render.samples must be at least 2".into());
        }
        if !(self.depth_min >= 0.0 && self.depth_min < self.depth_max) {
            return fail(format!(
                "degenerate depth range [{}, {}]",
                self.depth_min, self.depth_max
            ));
        }
        if !(self.z_range.0 < self.z_range.1) || !(self.tau_init > 0.0) || !(self.extent > 0.0) {
            return fail("invalid volume height range, tau or extent".into());
        }
        Ok(())
    }
}

/// Parsed `key = value` pairs, in file order of first appearance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    pub entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", n + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }
}

pub(crate) fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

pub(crate) fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

pub(crate) fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|x| parse_num(key, x.trim())).collect()
}

impl ModelConfig {
    /// Applies one key; returns `Ok(false)` when the key is not a model key.
    pub fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "model.preset" => {}
            "bev.w" => self.bev_w = parse_num(key, v)?,
            "bev.c" => self.bev_c = parse_num(key, v)?,
            "bev.height_anchors" => self.height_anchors = parse_list(key, v)?,
            "bev.extent" => self.extent = parse_num(key, v)?,
            "camera.width" => self.cam_width = parse_num(key, v)?,
            "camera.height" => self.cam_height = parse_num(key, v)?,
            "llm.dim" => self.llm_dim = parse_num(key, v)?,
            "llm.layers" => self.llm_layers = parse_num(key, v)?,
            "llm.heads" => self.llm_heads = parse_num(key, v)?,
            "llm.context" => self.context = parse_num(key, v)?,
            "world.horizon" => self.horizon = parse_num(key, v)?,
            "world.queries" => self.queries_per_step = parse_num(key, v)?,
            "world.query_init" => {
                self.query_init = QueryInit::parse(v)
                    .ok_or_else(|| Error::Config(format!("{key}: unknown pooling {v:?}")))?
            }
            "text.pooled" => self.pooled_text = parse_num(key, v)?,
            "link.enabled" => self.link_enabled = parse_bool(key, v)?,
            "link.n_blocks" => self.link_blocks = parse_num(key, v)?,
            "link.heads" => self.link_heads = parse_num(key, v)?,
            "link.textual_injection" => self.textual_injection = parse_bool(key, v)?,
            "link.ego_modulation" => self.ego_modulation = parse_bool(key, v)?,
            "link.modulation_hidden" => self.modulation_hidden = parse_num(key, v)?,
            "render.z" => self.vol_z = parse_num(key, v)?,
            "render.c" => self.vol_c = parse_num(key, v)?,
            "render.z_min" => self.z_range.0 = parse_num(key, v)?,
            "render.z_max" => self.z_range.1 = parse_num(key, v)?,
            "render.sdf_hidden" => self.sdf_hidden = parse_num(key, v)?,
            "render.samples" => self.samples_per_ray = parse_num(key, v)?,
            "render.depth_min" => self.depth_min = parse_num(key, v)?,
            "render.depth_max" => self.depth_max = parse_num(key, v)?,
            "render.tau_init" => self.tau_init = parse_num(key, v)?,
            "render.prior" => {
                self.sdf_prior = SdfPrior::parse(v)
                    .ok_or_else(|| Error::Config(format!("{key}: unknown prior {v:?}")))?
            }
            "render.weight_threshold" => self.weight_threshold = parse_num(key, v)?,
            "extractor.width" => self.extractor_width = parse_num(key, v)?,
            "lidar.elevations" => self.lidar.elevation_steps = parse_num(key, v)?,
            "lidar.azimuths" => self.lidar.azimuth_steps = parse_num(key, v)?,
            "lidar.elevation_min" => self.lidar.elevation_min_deg = parse_num(key, v)?,
            "lidar.elevation_max" => self.lidar.elevation_max_deg = parse_num(key, v)?,
            "lidar.max_range" => self.lidar.max_range = parse_num(key, v)?,
            "lidar.sensor_height" => self.lidar.sensor_height = parse_num(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_key_values(&self, kv: &mut KeyValues) {
        let anchors: Vec<String> = self.height_anchors.iter().map(|a| a.to_string()).collect();
        kv.set("bev.w", self.bev_w);
        kv.set("bev.c", self.bev_c);
        kv.set("bev.height_anchors", anchors.join(","));
        kv.set("bev.extent", self.extent);
        kv.set("camera.width", self.cam_width);
        kv.set("camera.height", self.cam_height);
        kv.set("llm.dim", self.llm_dim);
        kv.set("llm.layers", self.llm_layers);
        kv.set("llm.heads", self.llm_heads);
        kv.set("llm.context", self.context);
        kv.set("world.horizon", self.horizon);
        kv.set("world.queries", self.queries_per_step);
        kv.set("world.query_init", self.query_init.name());
        kv.set("render.prior", self.sdf_prior.name());
        kv.set("text.pooled", self.pooled_text);
        kv.set("link.enabled", self.link_enabled);
        kv.set("link.n_blocks", self.link_blocks);
        kv.set("link.heads", self.link_heads);
        kv.set("link.textual_injection", self.textual_injection);
        kv.set("link.ego_modulation", self.ego_modulation);
        kv.set("link.modulation_hidden", self.modulation_hidden);
        kv.set("render.z", self.vol_z);
        kv.set("render.c", self.vol_c);
        kv.set("render.z_min", self.z_range.0);
        kv.set("render.z_max", self.z_range.1);
        kv.set("render.sdf_hidden", self.sdf_hidden);
        kv.set("render.samples", self.samples_per_ray);
        kv.set("render.depth_min", self.depth_min);
        kv.set("render.depth_max", self.depth_max);
        kv.set("render.tau_init", self.tau_init);
        kv.set("render.weight_threshold", self.weight_threshold);
        kv.set("extractor.width", self.extractor_width);
        kv.set("lidar.elevations", self.lidar.elevation_steps);
        kv.set("lidar.azimuths", self.lidar.azimuth_steps);
        kv.set("lidar.elevation_min", self.lidar.elevation_min_deg);
        kv.set("lidar.elevation_max", self.lidar.elevation_max_deg);
        kv.set("lidar.max_range", self.lidar.max_range);
        kv.set("lidar.sensor_height", self.lidar.sensor_height);
    }
}

impl SceneConfig {
    pub fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "scene.static_boxes" => self.static_boxes = parse_num(key, v)?,
            "scene.dynamic_boxes" => self.dynamic_boxes = parse_num(key, v)?,
            "scene.extent" => self.extent = parse_num(key, v)?,
            "scene.frames" => self.frames = parse_num(key, v)?,
            "scene.dt" => self.dt_seconds = parse_num(key, v)?,
            "scene.ego_speed_min" => self.ego_speed.0 = parse_num(key, v)?,
            "scene.ego_speed_max" => self.ego_speed.1 = parse_num(key, v)?,
            "scene.max_turn_rate" => self.max_turn_rate = parse_num(key, v)?,
            "scene.agent_speed_min" => self.agent_speed.0 = parse_num(key, v)?,
            "scene.agent_speed_max" => self.agent_speed.1 = parse_num(key, v)?,
            "scene.ego_clearance" => self.ego_clearance = parse_num(key, v)?,
            "scene.ground_z" => self.ground_z = parse_num(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_key_values(&self, kv: &mut KeyValues) {
        kv.set("scene.static_boxes", self.static_boxes);
        kv.set("scene.dynamic_boxes", self.dynamic_boxes);
        kv.set("scene.extent", self.extent);
        kv.set("scene.frames", self.frames);
        kv.set("scene.dt", self.dt_seconds);
        kv.set("scene.ego_speed_min", self.ego_speed.0);
        kv.set("scene.ego_speed_max", self.ego_speed.1);
        kv.set("scene.max_turn_rate", self.max_turn_rate);
        kv.set("scene.agent_speed_min", self.agent_speed.0);
        kv.set("scene.agent_speed_max", self.agent_speed.1);
        kv.set("scene.ego_clearance", self.ego_clearance);
        kv.set("scene.ground_z", self.ground_z);
    }
}
