//! Synthetic native-format logs with a planted first-order command chain,
//! planted trigger relations, noise and undo/redo, plus the exact expected
//! preprocessing output.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logs::{format_log_line, format_raw_line, header_line, Action, Category, CommandEvent, Timestamp};
use crate::preprocess::{
    dataset_stats, sequences_to_tsv, CleanItem, CleanSequence, LexiconEntry, StatsReport, TranslationLexicon,
    TriggerKey, INTERNAL_LOC, PAN_LOC, PLUGIN_ERROR_LOC, SCROLL_LOC, SELECTION_LOC, ZOOM_LOC,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub n_commands: usize,
    pub n_tools: usize,
    pub n_menus: usize,
    /// Tools that each cause one hidden low-level event.
    pub n_triggers: usize,
    pub trigger_prob: [f64; 2],
    /// Successors per transition row that receive the random mass.
    pub branching: usize,
    /// Mass spread uniformly over every successor.
    pub smoothing: f64,
    /// Upper bound on any UNDO successor of a non-trigger Tool/Menu row.
    pub invocation_undo_cap: f64,
    pub languages: Vec<String>,
    /// Per gap between items: probability of an undo/redo episode.
    pub undo_rate: f64,
    /// Per gap between items: probability of a noise burst.
    pub noise_rate: f64,
    pub sessions: usize,
    pub length_median: f64,
    pub length_sigma: f64,
    pub min_length: usize,
    pub max_length: usize,
    pub mean_gap_secs: f64,
    pub files: usize,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            n_commands: 50,
            n_tools: 12,
            n_menus: 6,
            n_triggers: 4,
            trigger_prob: [0.9, 1.0],
            branching: 3,
            smoothing: 0.04,
            invocation_undo_cap: 0.2,
            languages: vec!["en".into()],
            undo_rate: 0.0,
            noise_rate: 0.0,
            sessions: 2000,
            length_median: 16.0,
            length_sigma: 0.8,
            min_length: 2,
            max_length: 400,
            mean_gap_secs: 4.0,
            files: 4,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    /// Every feature switched on: noise, undo/redo and three languages.
    pub fn noisy(seed: u64) -> Self {
        GeneratorSpec {
            languages: vec!["en".into(), "de".into(), "fr".into()],
            undo_rate: 0.1,
            noise_rate: 0.15,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        let rate = |x: f64| (0.0..=1.0).contains(&x);
        if self.n_commands < 2 || self.n_commands > 2000 {
            return bad("n_commands must lie in [2, 2000]");
        }
        if self.n_tools + self.n_menus > self.n_commands {
            return bad("more tools and menus than commands");
        }
        if self.n_triggers > self.n_tools {
            return bad("n_triggers exceeds n_tools");
        }
        let [lo, hi] = self.trigger_prob;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("trigger_prob must satisfy 0 < lo <= hi <= 1");
        }
        if self.branching == 0 || self.branching > self.n_commands {
            return bad("branching must lie in [1, n_commands]");
        }
        if !rate(self.smoothing) || !rate(self.undo_rate) || !rate(self.noise_rate) {
            return bad("rates must lie in [0, 1]");
        }
        if !(self.invocation_undo_cap > 0.0 && self.invocation_undo_cap <= 1.0) {
            return bad("invocation_undo_cap must lie in (0, 1]");
        }
        if self.languages.is_empty() {
            return bad("at least one language is needed");
        }
        if self.min_length < 1 || self.min_length > self.max_length {
            return bad("bad session length bounds");
        }
        if !(self.length_median > 0.0 && self.length_sigma >= 0.0 && self.mean_gap_secs > 0.0) {
            return bad("length and gap parameters must be positive");
        }
        if self.files == 0 {
            return bad("files must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenEvent {
    pub name: String,
    pub loc_id: i64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub name: String,
    pub category: Category,
    pub loc_id: i64,
    pub trigger: Option<HiddenEvent>,
}

/// Planted world: commands, transition matrix and its stationary distribution.
#[derive(Debug, Clone)]
pub struct World {
    pub commands: Vec<Command>,
    pub transitions: Vec<Vec<f64>>,
    pub stationary: Vec<f64>,
}

const UNDO_LOC_BASE: i64 = 1000;
const TOOL_LOC_BASE: i64 = 1000;
const MENU_LOC_BASE: i64 = 3000;
const HIDDEN_LOC_BASE: i64 = 5000;
const FAKE_LOC_BASE: i64 = 8000;

const VERBS: [&str; 16] = [
    "Move", "Rotate", "Mirror", "Offset", "Extrude", "Trim", "Split", "Join", "Align", "Scale", "Fillet",
    "Duplicate", "Attach", "Place", "Sweep", "Shell",
];
const NOUNS: [&str; 16] = [
    "Wall", "Slab", "Door", "Window", "Roof", "Stair", "Column", "Beam", "Surface", "Curve", "Polygon", "Grid",
    "Space", "Symbol", "Viewport", "Railing",
];

fn command_names(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut pool: Vec<String> = VERBS.iter().flat_map(|v| NOUNS.iter().map(move |n| format!("{v} {n}"))).collect();
    pool.shuffle(rng);
    (0..n)
        .map(|i| match pool.get(i) {
            Some(name) => name.clone(),
            None => format!("{} {}", pool[i % pool.len()], i / pool.len() + 1),
        })
        .collect()
}

/// Deterministic stand-in for a localized command name.
pub fn pseudo_translate(name: &str, language: &str) -> String {
    if language == "en" {
        return name.to_string();
    }
    let mut words: Vec<String> = name.split(' ').map(|w| format!("{}{}", w.to_lowercase(), language)).collect();
    words.reverse();
    let mut out = words.join(" ");
    if let Some(first) = out.get_mut(0..1) {
        first.make_ascii_uppercase();
    }
    out
}

/// Stationary distribution by power iteration on the lazy chain `(P + I) / 2`.
pub fn stationary(transitions: &[Vec<f64>]) -> Vec<f64> {
    let n = transitions.len();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..200_000 {
        let mut next = vec![0.0; n];
        for (i, row) in transitions.iter().enumerate() {
            next[i] += 0.5 * pi[i];
            for (j, p) in row.iter().enumerate() {
                next[j] += 0.5 * pi[i] * p;
            }
        }
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if diff < 1e-15 {
            break;
        }
    }
    let total: f64 = pi.iter().sum();
    pi.iter().map(|p| p / total).collect()
}

/// Mass of the `k` largest entries of a row.
pub fn top_k_mass(row: &[f64], k: usize) -> f64 {
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.iter().take(k).sum()
}

/// Recall@k of the predictor that ranks each row's successors by probability,
/// with the previous command distributed as `pi`.
pub fn bayes_recall_of(transitions: &[Vec<f64>], pi: &[f64], k: usize) -> f64 {
    transitions.iter().zip(pi).map(|(row, p)| p * top_k_mass(row, k)).sum()
}

pub fn bayes_recall(spec: &GeneratorSpec, k: usize) -> Result<f64, SynthError> {
    let world = World::new(spec)?;
    Ok(bayes_recall_of(&world.transitions, &world.stationary, k))
}

impl World {
    pub fn new(spec: &GeneratorSpec) -> Result<World, SynthError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0f_c0de);
        let names = command_names(spec.n_commands, &mut rng);
        let mut order: Vec<usize> = (0..spec.n_commands).collect();
        order.shuffle(&mut rng);
        let mut commands: Vec<Command> = names
            .into_iter()
            .enumerate()
            .map(|(i, name)| Command { name, category: Category::Undo, loc_id: UNDO_LOC_BASE + i as i64, trigger: None })
            .collect();
        for (rank, &i) in order.iter().enumerate() {
            let c = &mut commands[i];
            if rank < spec.n_tools {
                c.category = Category::Tool;
                c.loc_id = -(TOOL_LOC_BASE + i as i64);
                if rank < spec.n_triggers {
                    let [lo, hi] = spec.trigger_prob;
                    let probability = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                    c.trigger = Some(HiddenEvent {
                        name: format!("{} Result", c.name),
                        loc_id: HIDDEN_LOC_BASE + i as i64,
                        probability,
                    });
                }
            } else if rank < spec.n_tools + spec.n_menus {
                c.category = Category::Menu;
                c.loc_id = -(MENU_LOC_BASE + i as i64);
            }
        }

        let n = spec.n_commands;
        let mut transitions = Vec::with_capacity(n);
        for c in &commands {
            let mut row = vec![spec.smoothing / n as f64; n];
            let mut succ: Vec<usize> = (0..n).collect();
            succ.shuffle(&mut rng);
            let weights: Vec<f64> = (0..spec.branching).map(|_| rng.random::<f64>() + 0.05).collect();
            let total: f64 = weights.iter().sum();
            for (s, w) in succ.iter().zip(&weights) {
                row[*s] += (1.0 - spec.smoothing) * w / total;
            }
            if c.category != Category::Undo && c.trigger.is_none() {
                cap_undo_successors(&mut row, &commands, spec.invocation_undo_cap);
            }
            transitions.push(row);
        }
        let stationary = stationary(&transitions);
        Ok(World { commands, transitions, stationary })
    }

    pub fn planted_triggers(&self) -> Vec<(TriggerKey, i64, f64)> {
        self.commands
            .iter()
            .filter_map(|c| {
                let h = c.trigger.as_ref()?;
                Some((TriggerKey { category: c.category, loc_id: c.loc_id }, h.loc_id, h.probability))
            })
            .collect()
    }
}

/// Clips UNDO entries at `cap` and hands the excess to the other entries.
fn cap_undo_successors(row: &mut [f64], commands: &[Command], cap: f64) {
    let is_undo = |j: usize| commands[j].category == Category::Undo;
    let mut undo_mass = 0.0;
    for (j, p) in row.iter_mut().enumerate() {
        if is_undo(j) {
            *p = p.min(cap);
            undo_mass += *p;
        }
    }
    let other: f64 = (0..row.len()).filter(|j| !is_undo(*j)).map(|j| row[j]).sum();
    let n_other = (0..row.len()).filter(|j| !is_undo(*j)).count();
    for (j, p) in row.iter_mut().enumerate() {
        if !is_undo(j) {
            *p = if other > 0.0 { *p / other * (1.0 - undo_mass) } else { (1.0 - undo_mass) / n_other as f64 };
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTrigger {
    pub tool: TriggerKey,
    pub tool_name: String,
    pub event_loc: i64,
    pub event_name: String,
    pub probability: f64,
    /// Invocation lines emitted for the tool, dangling duplicates included.
    pub support: usize,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub sequences: Vec<CleanSequence>,
    pub triggers: Vec<PlantedTrigger>,
    pub lexicon: TranslationLexicon,
    pub stats: StatsReport,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    /// File name and content of each raw log file.
    pub logs: Vec<(String, String)>,
    pub truth: GroundTruth,
    pub world: World,
}

impl SynthOutput {
    pub fn log_texts(&self) -> Vec<&str> {
        self.logs.iter().map(|(_, t)| t.as_str()).collect()
    }

    /// Writes `logs/*.log`, `truth/sequences.tsv`, `truth/lexicon.tsv`,
    /// `truth/triggers.tsv` and `truth/stats.txt`. Returns the log paths.
    pub fn write_dir(&self, dir: &Path, spec: &GeneratorSpec) -> Result<Vec<PathBuf>, SynthError> {
        let logs = dir.join("logs");
        let truth = dir.join("truth");
        fs::create_dir_all(&logs)?;
        fs::create_dir_all(&truth)?;
        let mut paths = Vec::new();
        for (name, text) in &self.logs {
            let p = logs.join(name);
            fs::write(&p, text)?;
            paths.push(p);
        }
        fs::write(truth.join("sequences.tsv"), sequences_to_tsv(&self.truth.sequences))?;
        fs::write(truth.join("lexicon.tsv"), self.truth.lexicon.to_tsv())?;
        fs::write(truth.join("triggers.tsv"), planted_to_tsv(&self.truth.triggers))?;
        fs::write(truth.join("stats.txt"), format!("{}\n", self.truth.stats))?;
        fs::write(dir.join("spec.toml"), toml::to_string(spec).expect("spec serializes"))?;
        Ok(paths)
    }
}

pub fn planted_to_tsv(triggers: &[PlantedTrigger]) -> String {
    let mut out = String::from("tool_category\ttool_loc_id\ttool_name\tevent_loc_id\tevent_name\tprobability\tsupport\n");
    for t in triggers {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            t.tool.category, t.tool.loc_id, t.tool_name, t.event_loc, t.event_name, t.probability, t.support
        );
    }
    out
}

/// Appends rows for one session on a strictly increasing clock.
struct Renderer<'a> {
    session_id: String,
    clock: i64,
    lines: &'a mut Vec<String>,
}

impl Renderer<'_> {
    fn tick(&mut self, rng: &mut ChaCha8Rng) -> Timestamp {
        self.clock += rng.random_range(1..=300);
        Timestamp(self.clock)
    }

    fn emit(&mut self, rng: &mut ChaCha8Rng, event: &CommandEvent) -> Timestamp {
        let ts = self.tick(rng);
        self.lines.push(format_log_line(&self.session_id, ts, event.category(), &event.message()));
        ts
    }

    fn raw(&mut self, rng: &mut ChaCha8Rng, category: &str, message: &str) {
        let ts = self.tick(rng);
        self.lines.push(format_raw_line(&self.session_id, ts, category, message));
    }

    fn pair(&mut self, rng: &mut ChaCha8Rng, name: &str, loc: i64) -> Timestamp {
        self.emit(rng, &CommandEvent::undo(Action::Event, name, loc));
        self.emit(rng, &CommandEvent::undo(Action::EndEvent, name, loc))
    }
}

const NOISE: [(&str, i64); 5] = [
    ("Zoom", ZOOM_LOC),
    ("Pan", PAN_LOC),
    ("Scroll", SCROLL_LOC),
    ("Selection", SELECTION_LOC),
    ("Internal Update", INTERNAL_LOC),
];

pub fn generate(spec: &GeneratorSpec) -> Result<SynthOutput, SynthError> {
    let world = World::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_commands;
    let start = WeightedIndex::new(&world.stationary).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let rows: Vec<WeightedIndex<f64>> = world
        .transitions
        .iter()
        .map(|r| WeightedIndex::new(r).map_err(|e| SynthError::InvalidSpec(e.to_string())))
        .collect::<Result<_, _>>()?;
    let lengths = LogNormal::new(spec.length_median.ln(), spec.length_sigma)
        .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let gaps = Exp::new(1.0 / spec.mean_gap_secs).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let mut support = vec![0usize; n];

    let mut file_lines: Vec<Vec<String>> = (0..spec.files).map(|_| vec![header_line()]).collect();
    let mut sequences = Vec::with_capacity(spec.sessions);
    let base = Timestamp::parse("2023-03-01 08:00:00.000").expect("valid base time").0;
    for s in 0..spec.sessions {
        let session_id = format!("S{:06}", s);
        let lang = spec.languages[rng.random_range(0..spec.languages.len())].clone();
        let len = (lengths.sample(&mut rng).round() as usize).clamp(spec.min_length, spec.max_length);
        let mut path = Vec::with_capacity(len);
        let mut c = start.sample(&mut rng);
        path.push(c);
        while path.len() < len {
            c = rows[c].sample(&mut rng);
            path.push(c);
        }

        let mut renderer =
            Renderer { session_id: session_id.clone(), clock: base + s as i64 * 3_600_000, lines: &mut file_lines[s % spec.files] };
        let mut items = Vec::with_capacity(len);
        let mut prev_ts: Option<Timestamp> = None;
        let mut fake = 0i64;
        // Pending redo that must follow the next completing item.
        let mut pending_redo = false;
        for (pos, &ci) in path.iter().enumerate() {
            let cmd = &world.commands[ci];
            let local = pseudo_translate(&cmd.name, &lang);
            let completes = cmd.category == Category::Undo || cmd.trigger.is_some();
            if pos > 0 {
                renderer.clock += (gaps.sample(&mut rng) * 1000.0).round() as i64;
            }
            let ts = match (&cmd.category, &cmd.trigger) {
                (Category::Undo, _) => renderer.pair(&mut rng, &local, cmd.loc_id),
                (Category::Tool, None) => renderer.emit(&mut rng, &CommandEvent::tool(&local, cmd.loc_id)),
                (Category::Menu, _) => renderer.emit(&mut rng, &CommandEvent::menu(&local, cmd.loc_id, 0)),
                (Category::Tool, Some(hidden)) => {
                    while rng.random_bool(1.0 - hidden.probability) {
                        renderer.emit(&mut rng, &CommandEvent::tool(&local, cmd.loc_id));
                        support[ci] += 1;
                    }
                    support[ci] += 1;
                    let ts = renderer.emit(&mut rng, &CommandEvent::tool(&local, cmd.loc_id));
                    renderer.pair(&mut rng, &pseudo_translate(&hidden.name, &lang), hidden.loc_id);
                    ts
                }
            };
            if pending_redo && completes {
                let fake_name = "Temp Edit";
                renderer.emit(&mut rng, &CommandEvent::undo(Action::RedoEvent, fake_name, 0));
                pending_redo = false;
            }
            let dt = prev_ts.map_or(0.0, |p| ts.seconds_since(p));
            prev_ts = Some(ts);
            items.push(CleanItem { name: cmd.name.clone(), category: cmd.category, loc_id: cmd.loc_id, dt });

            // Gap after this item.
            if !pending_redo && rng.random_bool(spec.undo_rate) {
                match rng.random_range(0..3) {
                    0 => {
                        let (name, loc) = (format!("Temp Edit {fake}"), FAKE_LOC_BASE + fake % 100);
                        fake += 1;
                        renderer.pair(&mut rng, &name, loc);
                        renderer.emit(&mut rng, &CommandEvent::undo(Action::UndoEvent, &name, loc));
                    }
                    1 if completes => {
                        // Retract and restore the item just completed.
                        let loc = cmd.trigger.as_ref().map_or(cmd.loc_id, |h| h.loc_id);
                        renderer.emit(&mut rng, &CommandEvent::undo(Action::UndoEvent, &local, loc));
                        renderer.emit(&mut rng, &CommandEvent::undo(Action::RedoEvent, &local, loc));
                    }
                    2 if path.get(pos + 1).is_some_and(|&nx| {
                        let next = &world.commands[nx];
                        next.category == Category::Undo || next.trigger.is_some()
                    }) =>
                    {
                        // Undone edit, then a new completion voids the redo below.
                        let (name, loc) = (format!("Temp Edit {fake}"), FAKE_LOC_BASE + fake % 100);
                        fake += 1;
                        renderer.pair(&mut rng, &name, loc);
                        renderer.emit(&mut rng, &CommandEvent::undo(Action::UndoEvent, &name, loc));
                        pending_redo = true;
                    }
                    _ => {}
                }
            }
            if rng.random_bool(spec.noise_rate) {
                match rng.random_range(0..5) {
                    0 => {
                        let (name, loc) = NOISE[rng.random_range(0..NOISE.len())];
                        renderer.pair(&mut rng, name, loc);
                    }
                    1 => {
                        let victim = &world.commands[rng.random_range(0..n)];
                        let loc = if victim.category == Category::Undo { victim.loc_id } else { UNDO_LOC_BASE };
                        renderer.emit(&mut rng, &CommandEvent::undo(Action::Event, &pseudo_translate(&victim.name, &lang), loc));
                    }
                    2 => {
                        renderer.pair(&mut rng, "Plug-in Error", PLUGIN_ERROR_LOC);
                    }
                    3 => renderer.raw(&mut rng, "UNDO", "Autosave: Document (0)"),
                    _ => renderer.raw(&mut rng, "Render", "Render pass finished"),
                }
            }
        }
        sequences.push(CleanSequence { session_id, items });
    }

    let mut lexicon_entries = Vec::new();
    for c in &world.commands {
        let mut named = vec![(c.loc_id, c.name.clone())];
        if let Some(h) = &c.trigger {
            named.push((h.loc_id, h.name.clone()));
        }
        for (loc, name) in named {
            for lang in &spec.languages {
                lexicon_entries.push(LexiconEntry {
                    loc_id: loc,
                    language: lang.clone(),
                    source_name: pseudo_translate(&name, lang),
                    english_name: name.clone(),
                });
            }
        }
    }

    let triggers = world
        .commands
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            let h = c.trigger.as_ref()?;
            Some(PlantedTrigger {
                tool: TriggerKey { category: c.category, loc_id: c.loc_id },
                tool_name: c.name.clone(),
                event_loc: h.loc_id,
                event_name: h.name.clone(),
                probability: h.probability,
                support: support[i],
            })
        })
        .collect();

    let logs = file_lines
        .into_iter()
        .enumerate()
        .map(|(i, lines)| (format!("commands_{i:02}.log"), lines.join("\n") + "\n"))
        .collect();
    let stats = dataset_stats(&sequences);
    Ok(SynthOutput {
        logs,
        truth: GroundTruth { sequences, triggers, lexicon: TranslationLexicon::new(lexicon_entries), stats },
        world,
    })
}
