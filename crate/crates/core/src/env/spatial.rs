//! Square board with particles on it.
//!
//! Coordinates are global; the board is a `width × width` square of unit tiles
//! centred on `board.center`. Rotations are exact quarter turns, and every
//! coordinate that can occur is a small multiple of one half, so all state
//! arithmetic is exact in `f64`.
//!
//! Tiles are numbered in the board's own frame, so labels travel with the
//! board when it rotates or moves.

use indexmap::IndexMap;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::jsonx;
use crate::paramspace::{CrossConstraint, Label, ParamConfig, ParamDomain, ParameterSpec};
use crate::seed::{self, Seed};

pub const BOARD_ID: &str = "B1";
pub const PARTICLE_IDS: [&str; 2] = ["P1", "P2"];
pub const MIN_WIDTH: u32 = 5;
pub const MAX_WIDTH: u32 = 100;
pub const MAX_ACTIONS_PER_KIND: u32 = 15;
pub const ROTATIONS: [u32; 5] = [0, 90, 180, 270, 360];
/// Absolute tolerance for real-valued answers.
pub const REAL_TOLERANCE: f64 = 1e-6;

const SETUP: &str = include_str!("../../templates/spatial_setup.txt");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpatialError {
    #[error("({x}, {y}) is not on the board")]
    OffBoard { x: f64, y: f64 },
    #[error("invalid spatial parameters: {0}")]
    InvalidParams(String),
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Orientation {
    East,
    North,
    West,
    South,
}

impl Orientation {
    pub const ALL: [Orientation; 4] = [Orientation::East, Orientation::North, Orientation::West, Orientation::South];

    pub fn degrees(self) -> u32 {
        match self {
            Orientation::East => 0,
            Orientation::North => 90,
            Orientation::West => 180,
            Orientation::South => 270,
        }
    }

    /// Any multiple of 90, reduced mod 360.
    pub fn from_degrees(deg: u32) -> Option<Self> {
        (deg % 90 == 0).then(|| Orientation::ALL[((deg % 360) / 90) as usize])
    }

    /// Counter-clockwise turn by a multiple of 90 degrees.
    pub fn turned(self, deg: u32) -> Self {
        Orientation::ALL[(((self.degrees() + deg) % 360) / 90) as usize]
    }

    pub fn name(self) -> &'static str {
        match self {
            Orientation::East => "EAST",
            Orientation::North => "NORTH",
            Orientation::West => "WEST",
            Orientation::South => "SOUTH",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Orientation::ALL.into_iter().find(|o| o.name() == s)
    }

    fn unit(self) -> Point {
        match self {
            Orientation::East => Point::new(1.0, 0.0),
            Orientation::North => Point::new(0.0, 1.0),
            Orientation::West => Point::new(-1.0, 0.0),
            Orientation::South => Point::new(0.0, -1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

/// Counter-clockwise rotation of `p` about `center` by a multiple of 90°.
pub fn rotate_point(p: Point, center: Point, degrees: u32) -> Point {
    let d = p.sub(center);
    let r = match (degrees % 360) / 90 {
        0 => d,
        1 => Point::new(-d.y, d.x),
        2 => Point::new(-d.x, -d.y),
        _ => Point::new(d.y, -d.x),
    };
    // normalise -0.0 so serialized states compare byte-for-byte
    Point::new(r.x + 0.0, r.y + 0.0).add(center)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MoveDir {
    Left,
    Right,
    Forward,
    Backward,
}

impl MoveDir {
    pub const ALL: [MoveDir; 4] = [MoveDir::Left, MoveDir::Right, MoveDir::Forward, MoveDir::Backward];

    pub fn name(self) -> &'static str {
        match self {
            MoveDir::Left => "LEFT",
            MoveDir::Right => "RIGHT",
            MoveDir::Forward => "FORWARD",
            MoveDir::Backward => "BACKWARD",
        }
    }

    /// Heading of the move relative to the mover's orientation.
    fn offset(self) -> u32 {
        match self {
            MoveDir::Forward => 0,
            MoveDir::Left => 90,
            MoveDir::Backward => 180,
            MoveDir::Right => 270,
        }
    }

    fn blurb(self, who: &str) -> String {
        match self {
            MoveDir::Forward => format!("FORWARD - {who} moves forward 1 unit."),
            MoveDir::Backward => format!("BACKWARD - {who} moves backwards 1 unit. Orientation remains the same."),
            MoveDir::Left => format!("LEFT - {who} sidesteps 1 unit to the left. Orientation remains the same."),
            MoveDir::Right => format!("RIGHT - {who} sidesteps 1 unit to the right. Orientation remains the same."),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoardState {
    pub width: u32,
    pub center: Point,
    pub orientation: Orientation,
    pub wrap_around: bool,
}

impl BoardState {
    pub fn new(width: u32, wrap_around: bool) -> Self {
        BoardState {
            width,
            center: Point::new(0.0, 0.0),
            orientation: Orientation::North,
            wrap_around,
        }
    }

    fn half(&self) -> f64 {
        f64::from(self.width) / 2.0
    }

    pub fn contains(&self, p: Point) -> bool {
        (p.x - self.center.x).abs() < self.half() && (p.y - self.center.y).abs() < self.half()
    }

    /// Position relative to the centre, expressed in the board's own frame.
    pub fn to_local(&self, p: Point) -> Point {
        let back = (360 + Orientation::North.degrees() - self.orientation.degrees()) % 360;
        rotate_point(p.sub(self.center), Point::new(0.0, 0.0), back)
    }

    pub fn tile_at(&self, p: Point) -> Result<u32, SpatialError> {
        tile_of(self.width, self.to_local(p)).map_err(|_| SpatialError::OffBoard { x: p.x, y: p.y })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub id: String,
    pub position: Point,
    pub orientation: Orientation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialState {
    pub board: BoardState,
    pub particles: Vec<ParticleState>,
}

impl SpatialState {
    pub fn particle(&self, id: &str) -> Result<&ParticleState, SpatialError> {
        self.particles
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| SpatialError::UnknownEntity(id.to_string()))
    }

    fn location(&self, id: &str) -> Result<Point, SpatialError> {
        if id == BOARD_ID {
            Ok(self.board.center)
        } else {
            self.particle(id).map(|p| p.position)
        }
    }

    fn orientation(&self, id: &str) -> Result<Orientation, SpatialError> {
        if id == BOARD_ID {
            Ok(self.board.orientation)
        } else {
            self.particle(id).map(|p| p.orientation)
        }
    }
}

/// Zigzag tile number of a board-frame position (relative to the centre,
/// board facing NORTH). Row `r` and column `c` count from the bottom-left;
/// even rows run left to right, odd rows right to left.
pub fn tile_of(width: u32, local: Point) -> Result<u32, SpatialError> {
    let half = f64::from(width) / 2.0;
    if !(local.x.abs() < half && local.y.abs() < half) {
        return Err(SpatialError::OffBoard { x: local.x, y: local.y });
    }
    let c = (local.x + half).floor() as u32;
    let r = (local.y + half).floor() as u32;
    Ok(if r % 2 == 0 { r * width + c + 1 } else { r * width + (width - c) })
}

/// Board-frame centroid of tile `(row, col)`.
pub fn centroid(width: u32, row: u32, col: u32) -> Point {
    let half = f64::from(width) / 2.0;
    Point::new(f64::from(col) + 0.5 - half, f64::from(row) + 0.5 - half)
}

/// Clamps a particle step to the board: an in-bounds target is kept; with
/// wrap-around each overflowing coordinate jumps to the opposite edge lane,
/// otherwise the particle stays where it was.
pub fn wrap_or_stay(board: &BoardState, from: Point, to: Point) -> Point {
    if board.contains(to) {
        return to;
    }
    if !board.wrap_around {
        return from;
    }
    let half = board.half();
    let lane = |v: f64, c: f64| {
        if v - c >= half {
            c - half + 0.5
        } else if c - v >= half {
            c + half - 0.5
        } else {
            v
        }
    };
    Point::new(lane(to.x, board.center.x), lane(to.y, board.center.y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SpatialAction {
    BoardRotate { degrees: u32 },
    BoardMove { direction: MoveDir },
    ParticleRotate { particle: String, degrees: u32 },
    ParticleMove { particle: String, direction: MoveDir },
}

impl SpatialAction {
    fn phrase(&self) -> String {
        match self {
            SpatialAction::BoardRotate { degrees } => format!("board {BOARD_ID} is rotated by {degrees} degrees"),
            SpatialAction::BoardMove { direction } => format!("move board {BOARD_ID} {} by 1 units", direction.name()),
            SpatialAction::ParticleRotate { particle, degrees } => {
                format!("particle {particle} is rotated by {degrees} degrees")
            }
            SpatialAction::ParticleMove { particle, direction } => {
                format!("move particle {particle} {} by 1 units", direction.name())
            }
        }
    }
}

pub fn apply_action(state: &SpatialState, action: &SpatialAction) -> Result<SpatialState, SpatialError> {
    let mut next = state.clone();
    match action {
        SpatialAction::BoardRotate { degrees } => {
            let c = next.board.center;
            next.board.orientation = next.board.orientation.turned(*degrees);
            for p in &mut next.particles {
                p.position = rotate_point(p.position, c, *degrees);
                p.orientation = p.orientation.turned(*degrees);
            }
        }
        SpatialAction::BoardMove { direction } => {
            let step = next.board.orientation.turned(direction.offset()).unit();
            next.board.center = next.board.center.add(step);
            for p in &mut next.particles {
                p.position = p.position.add(step);
            }
        }
        SpatialAction::ParticleRotate { particle, degrees } => {
            let p = particle_mut(&mut next, particle)?;
            p.orientation = p.orientation.turned(*degrees);
        }
        SpatialAction::ParticleMove { particle, direction } => {
            let board = next.board.clone();
            let p = particle_mut(&mut next, particle)?;
            let to = p.position.add(p.orientation.turned(direction.offset()).unit());
            p.position = wrap_or_stay(&board, p.position, to);
        }
    }
    Ok(next)
}

fn particle_mut<'a>(state: &'a mut SpatialState, id: &str) -> Result<&'a mut ParticleState, SpatialError> {
    state
        .particles
        .iter_mut()
        .find(|p| p.id == id)
        .ok_or_else(|| SpatialError::UnknownEntity(id.to_string()))
}

pub fn run_actions(state: &SpatialState, actions: &[SpatialAction]) -> Result<SpatialState, SpatialError> {
    actions.iter().try_fold(state.clone(), |s, a| apply_action(&s, a))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Query {
    AbsoluteLocation { subject: String },
    TileNumber { subject: String },
    Orientation { subject: String },
    RelativeLocation { subject: String, reference: String },
}

fn key_prefix(id: &str) -> String {
    if id == BOARD_ID {
        format!("board_{id}")
    } else {
        format!("particle_{id}")
    }
}

fn entity_name(id: &str) -> String {
    if id == BOARD_ID {
        format!("board {id}")
    } else {
        format!("particle {id}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueKind {
    Float,
    Integer,
    String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemaField {
    pub key: String,
    pub kind: ValueKind,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnswerValue {
    Int(i64),
    Real(f64),
    Label(String),
}

pub type Answer = IndexMap<String, AnswerValue>;

impl Query {
    pub fn schema(&self) -> Vec<SchemaField> {
        let field = |key: String, kind, description: String| SchemaField { key, kind, description };
        match self {
            Query::AbsoluteLocation { subject } => {
                let (p, n) = (key_prefix(subject), entity_name(subject));
                vec![
                    field(format!("{p}_x"), ValueKind::Float, format!("The x-coordinate of {n} after all the actions.")),
                    field(format!("{p}_y"), ValueKind::Float, format!("The y-coordinate of {n} after all the actions.")),
                ]
            }
            Query::TileNumber { subject } => vec![field(
                format!("{}_tile", key_prefix(subject)),
                ValueKind::Integer,
                format!("The number of the tile {} is on after all the actions.", entity_name(subject)),
            )],
            Query::Orientation { subject } => vec![field(
                format!("{}_orientation", key_prefix(subject)),
                ValueKind::String,
                format!(
                    "The orientation of {} after all the actions, one of NORTH, EAST, SOUTH, WEST.",
                    entity_name(subject)
                ),
            )],
            Query::RelativeLocation { subject, reference } => {
                let p = format!("{}_relative_to_{}", key_prefix(subject), key_prefix(reference));
                let (s, r) = (entity_name(subject), entity_name(reference));
                vec![
                    field(
                        format!("{p}_x"),
                        ValueKind::Float,
                        format!("The x-coordinate of {s} minus the x-coordinate of {r}, after all the actions."),
                    ),
                    field(
                        format!("{p}_y"),
                        ValueKind::Float,
                        format!("The y-coordinate of {s} minus the y-coordinate of {r}, after all the actions."),
                    ),
                ]
            }
        }
    }

    fn question(&self) -> String {
        match self {
            Query::AbsoluteLocation { subject } => {
                format!("What is the location of {} after all the actions?", entity_name(subject))
            }
            Query::TileNumber { subject } => {
                format!("What is the tile number of {} after all the actions?", entity_name(subject))
            }
            Query::Orientation { subject } => {
                format!("What is the orientation of {} after all the actions?", entity_name(subject))
            }
            Query::RelativeLocation { subject, reference } => format!(
                "What is the location of {} relative to {} after all the actions?",
                entity_name(subject),
                entity_name(reference)
            ),
        }
    }

    /// Reads the answer off a final state.
    pub fn answer(&self, state: &SpatialState) -> Result<Answer, SpatialError> {
        let keys: Vec<String> = self.schema().into_iter().map(|f| f.key).collect();
        let mut out = Answer::new();
        match self {
            Query::AbsoluteLocation { subject } => {
                let p = state.location(subject)?;
                out.insert(keys[0].clone(), AnswerValue::Real(p.x));
                out.insert(keys[1].clone(), AnswerValue::Real(p.y));
            }
            Query::TileNumber { subject } => {
                let tile = state.board.tile_at(state.location(subject)?)?;
                out.insert(keys[0].clone(), AnswerValue::Int(i64::from(tile)));
            }
            Query::Orientation { subject } => {
                out.insert(keys[0].clone(), AnswerValue::Label(state.orientation(subject)?.name().to_string()));
            }
            Query::RelativeLocation { subject, reference } => {
                let d = state.location(subject)?.sub(state.location(reference)?);
                out.insert(keys[0].clone(), AnswerValue::Real(d.x + 0.0));
                out.insert(keys[1].clone(), AnswerValue::Real(d.y + 0.0));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialParams {
    pub width: u32,
    pub wrap_around: bool,
    pub board_moves: bool,
    pub board_allowed_moves: Vec<MoveDir>,
    pub board_rotates: bool,
    pub board_allowed_rotations: Vec<u32>,
    pub particle_moves: bool,
    pub particle_allowed_moves: Vec<MoveDir>,
    pub particle_rotates: bool,
    pub particle_allowed_rotations: Vec<u32>,
    pub number_of_board_rotation_actions: u32,
    pub number_of_particle_rotation_actions: u32,
    pub number_of_board_movement_actions: u32,
    pub number_of_particle_movement_actions: u32,
}

/// Design space whose parameter names match the designer's JSON schema.
pub fn parameter_spec() -> ParameterSpec {
    let moves = || ParamDomain::subset(MoveDir::ALL.map(|m| m.name()), 0, 4);
    let rotations = || ParamDomain::subset(ROTATIONS.map(i64::from), 0, 5);
    let count = || ParamDomain::int_range(0, i64::from(MAX_ACTIONS_PER_KIND)).with_default(0);
    let mut spec = ParameterSpec::new("spatial-board")
        .param("width", ParamDomain::int_range(i64::from(MIN_WIDTH), i64::from(MAX_WIDTH)).with_default(10))
        .param("wrap_around", ParamDomain::boolean().with_default(false))
        .param("board_moves", ParamDomain::boolean().with_default(false))
        .param("board_allowed_moves", moves().with_default(Vec::<Label>::new()))
        .param("board_rotates", ParamDomain::boolean().with_default(false))
        .param("board_allowed_rotations", rotations().with_default(Vec::<Label>::new()))
        .param("particle_moves", ParamDomain::boolean().with_default(true))
        .param("particle_allowed_moves", moves().with_default(vec![Label::from("FORWARD")]))
        .param("particle_rotates", ParamDomain::boolean().with_default(false))
        .param("particle_allowed_rotations", rotations().with_default(Vec::<Label>::new()))
        .param("number_of_board_rotation_actions", count())
        .param("number_of_particle_rotation_actions", count())
        .param("number_of_board_movement_actions", count())
        .param("number_of_particle_movement_actions", count().with_default(1));
    for (flag, set, n) in [
        ("board_moves", "board_allowed_moves", "number_of_board_movement_actions"),
        ("board_rotates", "board_allowed_rotations", "number_of_board_rotation_actions"),
        ("particle_moves", "particle_allowed_moves", "number_of_particle_movement_actions"),
        ("particle_rotates", "particle_allowed_rotations", "number_of_particle_rotation_actions"),
    ] {
        spec = spec
            .constraint(CrossConstraint::ImpliesNonempty { flag: flag.into(), target: set.into() })
            .constraint(CrossConstraint::ImpliesZero { flag: flag.into(), target: set.into() })
            .constraint(CrossConstraint::ImpliesZero { flag: flag.into(), target: n.into() });
    }
    spec
}

impl SpatialParams {
    pub fn from_config(config: &ParamConfig) -> Result<Self, SpatialError> {
        let value = serde_json::to_value(config).map_err(|e| SpatialError::InvalidParams(e.to_string()))?;
        let params: SpatialParams =
            serde_json::from_value(value).map_err(|e| SpatialError::InvalidParams(e.to_string()))?;
        params.check()?;
        Ok(params)
    }

    pub fn check(&self) -> Result<(), SpatialError> {
        let bad = |m: String| Err(SpatialError::InvalidParams(m));
        if !(MIN_WIDTH..=MAX_WIDTH).contains(&self.width) {
            return bad(format!("width {} outside [{MIN_WIDTH}, {MAX_WIDTH}]", self.width));
        }
        let groups = [
            ("board moves", self.board_moves, !self.board_allowed_moves.is_empty(), self.number_of_board_movement_actions),
            (
                "board rotations",
                self.board_rotates,
                !self.board_allowed_rotations.is_empty(),
                self.number_of_board_rotation_actions,
            ),
            (
                "particle moves",
                self.particle_moves,
                !self.particle_allowed_moves.is_empty(),
                self.number_of_particle_movement_actions,
            ),
            (
                "particle rotations",
                self.particle_rotates,
                !self.particle_allowed_rotations.is_empty(),
                self.number_of_particle_rotation_actions,
            ),
        ];
        for (what, flag, nonempty, count) in groups {
            if count > MAX_ACTIONS_PER_KIND {
                return bad(format!("{count} {what} exceeds {MAX_ACTIONS_PER_KIND}"));
            }
            if flag != nonempty {
                return bad(format!("{what}: enabled flag and allowed set disagree"));
            }
            if !flag && count > 0 {
                return bad(format!("{what} disabled but {count} requested"));
            }
        }
        for r in self.board_allowed_rotations.iter().chain(&self.particle_allowed_rotations) {
            if !ROTATIONS.contains(r) {
                return bad(format!("rotation {r} not in {ROTATIONS:?}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialProblem {
    pub params: SpatialParams,
    pub initial_state: SpatialState,
    pub actions: Vec<SpatialAction>,
    pub query: Query,
    pub answer_schema: Vec<SchemaField>,
    pub ground_truth: Answer,
    pub prompt: String,
}

pub fn compute_ground_truth(problem: &SpatialProblem) -> Result<Answer, SpatialError> {
    let end = run_actions(&problem.initial_state, &problem.actions)?;
    problem.query.answer(&end)
}

fn random_query(rng: &mut impl Rng) -> Query {
    let all: Vec<&str> = std::iter::once(BOARD_ID).chain(PARTICLE_IDS).collect();
    let pick = |rng: &mut _, from: &[&str]| from.choose(rng).expect("non-empty").to_string();
    match rng.random_range(0..4) {
        0 => Query::AbsoluteLocation { subject: pick(rng, &all) },
        1 => Query::TileNumber { subject: pick(rng, &PARTICLE_IDS) },
        2 => Query::Orientation { subject: pick(rng, &all) },
        _ => {
            let pair: Vec<&&str> = all.choose_multiple(rng, 2).collect();
            Query::RelativeLocation {
                subject: pair[0].to_string(),
                reference: pair[1].to_string(),
            }
        }
    }
}

pub fn generate_problem(params: &SpatialParams, seed: Seed) -> Result<SpatialProblem, SpatialError> {
    params.check()?;
    let mut rng = seed::rng(seed);
    let w = params.width;
    let tiles: Vec<u32> = (0..w * w).collect();
    let picked: Vec<u32> = tiles.choose_multiple(&mut rng, PARTICLE_IDS.len()).copied().collect();
    let particles = PARTICLE_IDS
        .iter()
        .zip(picked)
        .map(|(id, t)| ParticleState {
            id: id.to_string(),
            position: centroid(w, t / w, t % w),
            orientation: *Orientation::ALL.choose(&mut rng).expect("non-empty"),
        })
        .collect();
    let initial_state = SpatialState {
        board: BoardState::new(w, params.wrap_around),
        particles,
    };

    let mut actions = Vec::new();
    for _ in 0..params.number_of_board_rotation_actions {
        let degrees = *params.board_allowed_rotations.choose(&mut rng).expect("checked non-empty");
        actions.push(SpatialAction::BoardRotate { degrees });
    }
    for _ in 0..params.number_of_board_movement_actions {
        let direction = *params.board_allowed_moves.choose(&mut rng).expect("checked non-empty");
        actions.push(SpatialAction::BoardMove { direction });
    }
    for _ in 0..params.number_of_particle_rotation_actions {
        let degrees = *params.particle_allowed_rotations.choose(&mut rng).expect("checked non-empty");
        let particle = PARTICLE_IDS.choose(&mut rng).expect("non-empty").to_string();
        actions.push(SpatialAction::ParticleRotate { particle, degrees });
    }
    for _ in 0..params.number_of_particle_movement_actions {
        let direction = *params.particle_allowed_moves.choose(&mut rng).expect("checked non-empty");
        let particle = PARTICLE_IDS.choose(&mut rng).expect("non-empty").to_string();
        actions.push(SpatialAction::ParticleMove { particle, direction });
    }
    actions.shuffle(&mut rng);

    let query = random_query(&mut rng);
    let mut problem = SpatialProblem {
        params: params.clone(),
        initial_state,
        actions,
        answer_schema: query.schema(),
        query,
        ground_truth: Answer::new(),
        prompt: String::new(),
    };
    problem.ground_truth = compute_ground_truth(&problem)?;
    problem.prompt = render_prompt(&problem)?;
    Ok(problem)
}

fn fmt_real(v: f64) -> String {
    format!("{v:?}")
}

fn moves_section(who: &str, allowed: &[MoveDir], subject: &str) -> String {
    if allowed.is_empty() {
        return format!("## Allowed moves\n\nThe {who} cannot move.\n");
    }
    let lines: Vec<String> = allowed.iter().map(|m| m.blurb(who)).collect();
    format!("## Allowed moves\n\nThe following moves are allowed for {subject}:\n{}\n", lines.join("\n"))
}

fn rotations_section(who: &str, allowed: &[u32], subject: &str) -> String {
    if allowed.is_empty() {
        return format!("## Allowed rotations\n\nThe {who} cannot rotate.\n");
    }
    let lines: Vec<String> = allowed.iter().map(|r| format!("{r} - {who} rotates {r} degrees.")).collect();
    format!("## Allowed rotations\n\nThe following rotations are allowed for {subject}:\n{}\n", lines.join("\n"))
}

fn actions_text(actions: &[SpatialAction]) -> String {
    let n = actions.len();
    match n {
        0 => "No actions are performed.".to_string(),
        1 => format!("First, {}.", actions[0].phrase()),
        _ => actions
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let lead = if i == 0 {
                    "First"
                } else if i + 1 == n {
                    "Finally"
                } else {
                    "Then"
                };
                format!("{lead}, {}.", a.phrase())
            })
            .collect::<Vec<_>>()
            .join(" "),
    }
}

pub fn render_prompt(problem: &SpatialProblem) -> Result<String, SpatialError> {
    let s = &problem.initial_state;
    let b = &s.board;
    let p = &problem.params;
    let w = f64::from(b.width);
    let mut out = String::from(SETUP);

    out.push_str(&format!("\n# Board {BOARD_ID}\n\n## Setup\n"));
    out.push_str(&format!(
        "A board is {} units wide and {} units tall, and contains {} particle(s).\n",
        fmt_real(w),
        fmt_real(w),
        s.particles.len()
    ));
    out.push_str(&format!("It is centered at ({}, {}).\n", fmt_real(b.center.x), fmt_real(b.center.y)));
    out.push_str(&format!(
        "Its orientation is defined as the center's orientation, which is {}.\n\nInitially, the board is oriented {}.\n\n",
        b.orientation.name(),
        b.orientation.name()
    ));
    out.push_str(
        "The board has four sides: SIDE-1, SIDE-2, SIDE-3, SIDE-4\n\
         The side from the south west corner to south east corner is the bottom side of the board. It is called SIDE-1\n\
         The side from the south east corner to north east corner is the right side of the board. It is called SIDE-2\n\
         The side from the north east corner to north west corner is the top side of the board. It is called SIDE-3\n\
         The side from the north west corner to south west corner is the left side of the board. It is called SIDE-4\n\n",
    );
    out.push_str(
        "## Boundaries\n\nIn the event the particle move results in the particle moving beyond the boundary of the board, the resulting location is decided as follows:\n\nWhen a particle is on a tile, it means its location is the tile's centroid.\n",
    );
    if b.wrap_around {
        for (side, opp) in [(1, 3), (2, 4), (3, 1), (4, 2)] {
            out.push_str(&format!(
                "The SIDE-{side} of the board can be crossed when approaching from the SIDE-{opp}, and the particle(s) will move to the opposite tile on the SIDE-{opp}.\n"
            ));
        }
    } else {
        out.push_str("None of the sides of the board can be crossed. A particle whose move would cross a side remains at its current tile.\n");
    }
    out.push_str(
        "\n## Tiles on the board\n\nThe board is divided into square tiles of size 1 units by 1 units.\n\
         Tiles are numbered from 1 to (width * height), starting from the bottom left corner in a zigzag pattern. Going from left to right, then right to left, and so on.\n\
         For example, for a 3x3 board, the tiles are numbered as follows:\n7 8 9\n6 5 4\n1 2 3\n\n",
    );
    out.push_str(&moves_section("board", &p.board_allowed_moves, "the board"));
    out.push('\n');
    out.push_str(&rotations_section("board", &p.board_allowed_rotations, "the board"));

    for particle in &s.particles {
        out.push_str(&format!("\n# Particle {}\n\n## Initial State\n\n", particle.id));
        out.push_str(&format!(
            "It is located at ({}, {}), and is facing {} ({} degrees).\n",
            fmt_real(particle.position.x),
            fmt_real(particle.position.y),
            particle.orientation.name(),
            particle.orientation.degrees()
        ));
        out.push_str(&format!("It is on tile {}.\nIt is on board {BOARD_ID}.\n\n", b.tile_at(particle.position)?));
        out.push_str(&moves_section("particle", &p.particle_allowed_moves, "this particle"));
        out.push('\n');
        out.push_str(&rotations_section("particle", &p.particle_allowed_rotations, "this particle"));
    }

    out.push_str(&format!("\n# Actions\n\nThe actions are the following:\n{}\n", actions_text(&problem.actions)));
    out.push_str(&format!("\n# Question\n\n{}\n", problem.query.question()));
    out.push_str(
        "\n# Response format - JSON schema\nYou must get the final answer and convert it to the following JSON data structure. Follow the schema exactly.\n",
    );
    for f in &problem.answer_schema {
        let kind = match f.kind {
            ValueKind::Float => "Float",
            ValueKind::Integer => "Integer",
            ValueKind::String => "String",
        };
        out.push_str(&format!("\nKey: `{}`\nType: {kind},\nDescription: {}\n", f.key, f.description));
    }
    Ok(out)
}

fn value_matches(kind: ValueKind, expected: &AnswerValue, got: &Value) -> bool {
    match (kind, expected) {
        (ValueKind::Float, AnswerValue::Real(e)) => got.as_f64().is_some_and(|g| (g - e).abs() <= REAL_TOLERANCE),
        (ValueKind::Integer, AnswerValue::Int(e)) => match got {
            Value::Number(n) => n.as_i64() == Some(*e) || n.as_f64() == Some(*e as f64),
            _ => false,
        },
        (ValueKind::String, AnswerValue::Label(e)) => got.as_str() == Some(e.as_str()),
        _ => false,
    }
}

/// Checks the last JSON object in `response` against the ground truth. Keys
/// outside the schema are ignored.
pub fn verify_answer(problem: &SpatialProblem, response: &str) -> bool {
    let Some(obj) = jsonx::last_json_object(response) else {
        return false;
    };
    problem.answer_schema.iter().all(|f| {
        match (problem.ground_truth.get(&f.key), obj.get(&f.key)) {
            (Some(expected), Some(got)) => value_matches(f.kind, expected, got),
            _ => false,
        }
    })
}

/// Serializes an answer as a JSON object.
pub fn answer_json(answer: &Answer) -> String {
    serde_json::to_string(answer).expect("answers serialize")
}
