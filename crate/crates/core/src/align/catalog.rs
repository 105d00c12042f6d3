//! Built-in weather / air-quality variable catalog and the channel presets
//! used by the input ablations.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pressure levels kept for multi-level variables, hPa, top of atmosphere first.
pub const PRESSURE_LEVELS: [u32; 7] = [50, 250, 500, 600, 700, 850, 925];

/// Level standing in for the near-surface slice (highest pressure).
pub const SURFACE_LEVEL: u32 = 925;

/// Level standing in for the high-altitude slice (lowest pressure).
pub const UPPER_LEVEL: u32 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Weather,
    AirQuality,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Levels {
    Single,
    Pressure(Vec<u32>),
}

impl Levels {
    pub fn is_single(&self) -> bool {
        matches!(self, Levels::Single)
    }

    /// Level list with `None` standing for the single level.
    pub fn expand(&self) -> Vec<Option<u32>> {
        match self {
            Levels::Single => vec![None],
            Levels::Pressure(l) => l.iter().copied().map(Some).collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Levels::Single => 1,
            Levels::Pressure(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub long_name: String,
    pub short_name: String,
    pub family: Family,
    pub levels: Levels,
    pub units: String,
}

impl VariableSpec {
    fn new(long: &str, short: &str, family: Family, multi: bool, units: &str) -> Self {
        Self {
            long_name: long.into(),
            short_name: short.into(),
            family,
            levels: if multi { Levels::Pressure(PRESSURE_LEVELS.to_vec()) } else { Levels::Single },
            units: units.into(),
        }
    }

    pub fn channels(&self) -> Vec<Channel> {
        self.levels
            .expand()
            .into_iter()
            .map(|level| Channel {
                variable: self.short_name.clone(),
                level,
                family: self.family,
                units: self.units.clone(),
            })
            .collect()
    }
}

/// One 2-D input plane: a variable at one level.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Channel {
    pub variable: String,
    pub level: Option<u32>,
    pub family: Family,
    pub units: String,
}

impl Channel {
    /// `z_500` for pressure-level channels, the short name otherwise.
    pub fn name(&self) -> String {
        match self.level {
            Some(l) => format!("{}_{}", self.variable, l),
            None => self.variable.clone(),
        }
    }

    pub fn is_air_quality(&self) -> bool {
        self.family == Family::AirQuality
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Multiplier and label taking a stored unit to the unit used for reporting
/// and for the log transform. Mass concentrations go to µg m-3.
pub fn display_unit(units: &str) -> (f64, String) {
    match units {
        "kg m**-3" => (1e9, "ug m-3".into()),
        "kg kg**-1" => (1e9, "ug kg-1".into()),
        "kg m**-2" => (1e6, "mg m-2".into()),
        other => (1.0, other.into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableCatalog {
    pub variables: Vec<VariableSpec>,
}

impl VariableCatalog {
    /// The 9 weather and 12 air-quality variables of the aligned dataset.
    pub fn builtin() -> Self {
        use Family::{AirQuality as A, Weather as W};
        let v = VariableSpec::new;
        Self {
            variables: vec![
                v("geopotential", "z", W, true, "m**2 s**-2"),
                v("temperature", "t", W, true, "K"),
                v("specific_humidity", "q", W, true, "kg kg**-1"),
                v("relative_humidity", "r", W, true, "%"),
                v("u_component_of_wind", "u", W, true, "m s**-1"),
                v("v_component_of_wind", "v", W, true, "m s**-1"),
                v("2m_temperature", "t2m", W, false, "K"),
                v("10m_u_component_of_wind", "u10", W, false, "m s**-1"),
                v("10m_v_component_of_wind", "v10", W, false, "m s**-1"),
                v("carbon_monoxide", "co", A, true, "kg kg**-1"),
                v("ozone", "go3", A, true, "kg kg**-1"),
                v("nitrogen_monoxide", "no", A, true, "kg kg**-1"),
                v("nitrogen_dioxide", "no2", A, true, "kg kg**-1"),
                v("sulphur_dioxide", "so2", A, true, "kg kg**-1"),
                v("particulate_matter_1um", "pm1", A, false, "kg m**-3"),
                v("particulate_matter_10um", "pm10", A, false, "kg m**-3"),
                v("particulate_matter_2.5um", "pm2p5", A, false, "kg m**-3"),
                v("total_column_carbon_monoxide", "tcco", A, false, "kg m**-2"),
                v("total_column_nitrogen_monoxide", "tc_no", A, false, "kg m**-2"),
                v("total_column_nitrogen_dioxide", "tcno2", A, false, "kg m**-2"),
                v("total_column_ozone", "gtco3", A, false, "kg m**-2"),
            ],
        }
    }

    pub fn new(variables: Vec<VariableSpec>) -> Result<Self> {
        let catalog = Self { variables };
        catalog.validate()?;
        Ok(catalog)
    }

    /// Loads a JSON override of the built-in table.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let catalog: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        catalog.validate()?;
        Ok(catalog)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for v in &self.variables {
            if !seen.insert(v.short_name.as_str()) {
                return Err(Error::Data(format!("duplicate short name `{}` in catalog", v.short_name)));
            }
            if let Levels::Pressure(levels) = &v.levels {
                if levels.len() != PRESSURE_LEVELS.len() {
                    return Err(Error::Data(format!(
                        "`{}` lists {} pressure levels, expected {}",
                        v.short_name,
                        levels.len(),
                        PRESSURE_LEVELS.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, short_name: &str) -> Option<&VariableSpec> {
        self.variables.iter().find(|v| v.short_name == short_name)
    }

    pub fn family(&self, family: Family) -> impl Iterator<Item = &VariableSpec> {
        self.variables.iter().filter(move |v| v.family == family)
    }

    /// Every channel of the catalog, in table order.
    pub fn channels(&self) -> Vec<Channel> {
        self.variables.iter().flat_map(VariableSpec::channels).collect()
    }

    /// Looks a channel up by its `name()`.
    pub fn channel(&self, name: &str) -> Result<Channel> {
        self.channels()
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::Usage(format!("unknown channel `{name}`")))
    }
}

/// How multi-level variables of one family enter a preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slice {
    All,
    Surface,
    Upper,
    PmOnly,
    None,
}

/// Variable-selection presets of the input ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "3PM")]
    ThreePm,
    #[serde(rename = "Weather+3PM")]
    WeatherThreePm,
    #[serde(rename = "AQ")]
    Aq,
    #[serde(rename = "Weather+AQ")]
    WeatherAq,
    #[serde(rename = "SurfaceWeather+SurfaceAQ")]
    SurfaceWeatherSurfaceAq,
    #[serde(rename = "¬SurfaceWeather+¬SurfaceAQ")]
    UpperWeatherUpperAq,
    #[serde(rename = "SurfaceWeather+AQ")]
    SurfaceWeatherAq,
    #[serde(rename = "Weather+SurfaceAQ")]
    WeatherSurfaceAq,
}

/// The three particulate-matter channels in reporting order.
pub const PM_VARIABLES: [&str; 3] = ["pm2p5", "pm10", "pm1"];

impl Preset {
    pub const ALL: [Preset; 8] = [
        Preset::ThreePm,
        Preset::WeatherThreePm,
        Preset::Aq,
        Preset::WeatherAq,
        Preset::SurfaceWeatherSurfaceAq,
        Preset::UpperWeatherUpperAq,
        Preset::SurfaceWeatherAq,
        Preset::WeatherSurfaceAq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::ThreePm => "3PM",
            Preset::WeatherThreePm => "Weather+3PM",
            Preset::Aq => "AQ",
            Preset::WeatherAq => "Weather+AQ",
            Preset::SurfaceWeatherSurfaceAq => "SurfaceWeather+SurfaceAQ",
            Preset::UpperWeatherUpperAq => "¬SurfaceWeather+¬SurfaceAQ",
            Preset::SurfaceWeatherAq => "SurfaceWeather+AQ",
            Preset::WeatherSurfaceAq => "Weather+SurfaceAQ",
        }
    }

    /// Accepts the canonical names; `~` and `!` are ASCII stand-ins for `¬`.
    pub fn from_name(name: &str) -> Result<Self> {
        let norm: String = name.trim().replace(['~', '!'], "¬").replace(' ', "");
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(&norm))
            .ok_or_else(|| Error::UnknownPreset {
                name: name.into(),
                valid: Self::ALL.map(Preset::name).join(", "),
            })
    }

    fn slices(self) -> (Slice, Slice) {
        match self {
            Preset::ThreePm => (Slice::None, Slice::PmOnly),
            Preset::WeatherThreePm => (Slice::All, Slice::PmOnly),
            Preset::Aq => (Slice::None, Slice::All),
            Preset::WeatherAq => (Slice::All, Slice::All),
            Preset::SurfaceWeatherSurfaceAq => (Slice::Surface, Slice::Surface),
            Preset::UpperWeatherUpperAq => (Slice::Upper, Slice::Upper),
            Preset::SurfaceWeatherAq => (Slice::Surface, Slice::All),
            Preset::WeatherSurfaceAq => (Slice::All, Slice::Surface),
        }
    }

    /// Ordered channel list: weather channels first, then air quality.
    pub fn channels(self, catalog: &VariableCatalog) -> Result<Vec<Channel>> {
        let (weather, aq) = self.slices();
        let mut out = family_channels(catalog, Family::Weather, weather)?;
        out.extend(family_channels(catalog, Family::AirQuality, aq)?);
        if out.is_empty() {
            return Err(Error::EmptySelection(format!("preset {} selects no channels", self.name())));
        }
        Ok(out)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn family_channels(catalog: &VariableCatalog, family: Family, slice: Slice) -> Result<Vec<Channel>> {
    let specs: Vec<&VariableSpec> = catalog.family(family).collect();
    let pick_level = |spec: &VariableSpec, level: u32| -> Result<Vec<Channel>> {
        let chans = spec.channels();
        if spec.levels.is_single() {
            return Ok(chans);
        }
        let found: Vec<Channel> = chans.into_iter().filter(|c| c.level == Some(level)).collect();
        if found.is_empty() {
            return Err(Error::MissingLevel { variable: spec.short_name.clone(), level });
        }
        Ok(found)
    };
    let mut out = Vec::new();
    match slice {
        Slice::None => {}
        Slice::All => out.extend(specs.iter().flat_map(|s| s.channels())),
        Slice::Surface => {
            for s in &specs {
                out.extend(pick_level(s, SURFACE_LEVEL)?);
            }
        }
        Slice::Upper => {
            for s in &specs {
                out.extend(pick_level(s, UPPER_LEVEL)?);
            }
        }
        Slice::PmOnly => {
            for name in PM_VARIABLES {
                let spec = catalog
                    .get(name)
                    .ok_or_else(|| Error::Data(format!("catalog lacks `{name}`")))?;
                out.extend(spec.channels());
            }
        }
    }
    Ok(out)
}

/// Channel list for a preset name against the built-in catalog.
pub fn select_preset(name: &str) -> Result<Vec<Channel>> {
    Preset::from_name(name)?.channels(&VariableCatalog::builtin())
}
