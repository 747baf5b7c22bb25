//! The unified GUI action language.
//!
//! Actions are written as `Verb(key=value, ...)` with three value forms:
//! integer pairs `(x, y)`, quoted text `'...'` (or `"..."`), and lists of
//! quoted text `['ctrl', 'c']`. Coordinates live in a normalized
//! `[0, 1000]` screen space. Agent turns wrap the action in a
//! `<think>`/`<action>`/`<conclusion>` envelope, see [`parse_response`].

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound (inclusive) of the normalized coordinate space.
pub const COORD_MAX: i32 = 1000;

/// Maximum number of keys in one `Hotkey`.
pub const MAX_HOTKEYS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: i32,
    pub y: i32,
}

impl Point {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn on_screen(&self) -> bool {
        (0..=COORD_MAX).contains(&self.x) && (0..=COORD_MAX).contains(&self.y)
    }
}

/// Axis-aligned box in normalized coordinates, edges inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[i32; 4]", into = "[i32; 4]")]
pub struct BBox {
    x1: i32,
    y1: i32,
    x2: i32,
    y2: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid box ({x1}, {y1}, {x2}, {y2}): corners must be ordered and within [0, 1000]")]
pub struct InvalidBox {
    pub x1: i32,
    pub y1: i32,
    pub x2: i32,
    pub y2: i32,
}

impl BBox {
    pub fn new(x1: i32, y1: i32, x2: i32, y2: i32) -> Result<Self, InvalidBox> {
        let ok = x1 <= x2
            && y1 <= y2
            && Point::new(x1, y1).on_screen()
            && Point::new(x2, y2).on_screen();
        if ok {
            Ok(Self { x1, y1, x2, y2 })
        } else {
            Err(InvalidBox { x1, y1, x2, y2 })
        }
    }

    pub fn x1(&self) -> i32 {
        self.x1
    }
    pub fn y1(&self) -> i32 {
        self.y1
    }
    pub fn x2(&self) -> i32 {
        self.x2
    }
    pub fn y2(&self) -> i32 {
        self.y2
    }

    pub fn contains(&self, p: Point) -> bool {
        (self.x1..=self.x2).contains(&p.x) && (self.y1..=self.y2).contains(&p.y)
    }

    /// Integer center, rounded toward the top-left corner.
    pub fn center(&self) -> Point {
        Point::new((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)
    }

    pub fn overlaps(&self, other: &BBox) -> bool {
        self.x1 <= other.x2 && other.x1 <= self.x2 && self.y1 <= other.y2 && other.y1 <= self.y2
    }
}

impl TryFrom<[i32; 4]> for BBox {
    type Error = InvalidBox;

    fn try_from(v: [i32; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [i32; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Platform {
    Mobile,
    Web,
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Platform::Mobile => "mobile",
            Platform::Web => "web",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScrollDirection {
    Up,
    Down,
}

impl ScrollDirection {
    fn as_str(self) -> &'static str {
        match self {
            ScrollDirection::Up => "up",
            ScrollDirection::Down => "down",
        }
    }
}

/// Mobile scrolls are swipes between two points; web scrolls only name a direction.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Scroll {
    Swipe { start: Point, end: Point },
    Direction(ScrollDirection),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LaunchTarget {
    App(String),
    Url(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Action {
    Click(Point),
    Drag { start: Point, end: Point },
    Scroll(Scroll),
    Type(String),
    Launch(LaunchTarget),
    Wait,
    Finished(String),
    CallUser(String),
    LongPress(Point),
    PressBack,
    PressHome,
    PressEnter,
    PressRecent,
    Hover(Point),
    DoubleClick(Point),
    Hotkey(Vec<String>),
}

/// Variant tag of an [`Action`], used for type rewards and policy one-hots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionKind {
    Click,
    Drag,
    Scroll,
    Type,
    Launch,
    Wait,
    Finished,
    CallUser,
    LongPress,
    PressBack,
    PressHome,
    PressEnter,
    PressRecent,
    Hover,
    DoubleClick,
    Hotkey,
}

impl ActionKind {
    pub const ALL: [ActionKind; 16] = [
        ActionKind::Click,
        ActionKind::Drag,
        ActionKind::Scroll,
        ActionKind::Type,
        ActionKind::Launch,
        ActionKind::Wait,
        ActionKind::Finished,
        ActionKind::CallUser,
        ActionKind::LongPress,
        ActionKind::PressBack,
        ActionKind::PressHome,
        ActionKind::PressEnter,
        ActionKind::PressRecent,
        ActionKind::Hover,
        ActionKind::DoubleClick,
        ActionKind::Hotkey,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::Click => "Click",
            ActionKind::Drag => "Drag",
            ActionKind::Scroll => "Scroll",
            ActionKind::Type => "Type",
            ActionKind::Launch => "Launch",
            ActionKind::Wait => "Wait",
            ActionKind::Finished => "Finished",
            ActionKind::CallUser => "CallUser",
            ActionKind::LongPress => "LongPress",
            ActionKind::PressBack => "PressBack",
            ActionKind::PressHome => "PressHome",
            ActionKind::PressEnter => "PressEnter",
            ActionKind::PressRecent => "PressRecent",
            ActionKind::Hover => "Hover",
            ActionKind::DoubleClick => "DoubleClick",
            ActionKind::Hotkey => "Hotkey",
        }
    }

    fn from_verb(verb: &str) -> Option<Self> {
        ActionKind::ALL.into_iter().find(|k| k.name() == verb)
    }

    /// Hover, DoubleClick and Hotkey exist only in the web action set.
    pub fn web_only(self) -> bool {
        matches!(
            self,
            ActionKind::Hover | ActionKind::DoubleClick | ActionKind::Hotkey
        )
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Click(_) => ActionKind::Click,
            Action::Drag { .. } => ActionKind::Drag,
            Action::Scroll(_) => ActionKind::Scroll,
            Action::Type(_) => ActionKind::Type,
            Action::Launch(_) => ActionKind::Launch,
            Action::Wait => ActionKind::Wait,
            Action::Finished(_) => ActionKind::Finished,
            Action::CallUser(_) => ActionKind::CallUser,
            Action::LongPress(_) => ActionKind::LongPress,
            Action::PressBack => ActionKind::PressBack,
            Action::PressHome => ActionKind::PressHome,
            Action::PressEnter => ActionKind::PressEnter,
            Action::PressRecent => ActionKind::PressRecent,
            Action::Hover(_) => ActionKind::Hover,
            Action::DoubleClick(_) => ActionKind::DoubleClick,
            Action::Hotkey(_) => ActionKind::Hotkey,
        }
    }

    /// The single target point of point actions (Click, LongPress, Hover, DoubleClick).
    pub fn point(&self) -> Option<Point> {
        match self {
            Action::Click(p) | Action::LongPress(p) | Action::Hover(p) | Action::DoubleClick(p) => {
                Some(*p)
            }
            _ => None,
        }
    }

    /// Start and end points of two-point actions (Drag and mobile Scroll).
    pub fn endpoints(&self) -> Option<(Point, Point)> {
        match self {
            Action::Drag { start, end } | Action::Scroll(Scroll::Swipe { start, end }) => {
                Some((*start, *end))
            }
            _ => None,
        }
    }

    /// Free-text content of Type, Finished and CallUser.
    pub fn content(&self) -> Option<&str> {
        match self {
            Action::Type(s) | Action::Finished(s) | Action::CallUser(s) => Some(s),
            _ => None,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, Action::Finished(_) | Action::CallUser(_))
    }

    pub fn validate(&self, platform: Platform) -> Result<(), ActionParseError> {
        if self.kind().web_only() && platform == Platform::Mobile {
            return Err(ActionParseError::PlatformInvalid {
                verb: self.kind().name(),
                platform,
            });
        }
        let points: Vec<Point> = match self {
            Action::Click(p) | Action::LongPress(p) | Action::Hover(p) | Action::DoubleClick(p) => {
                vec![*p]
            }
            Action::Drag { start, end } | Action::Scroll(Scroll::Swipe { start, end }) => {
                vec![*start, *end]
            }
            _ => Vec::new(),
        };
        if let Some(p) = points.iter().find(|p| !p.on_screen()) {
            return Err(ActionParseError::CoordinateOutOfRange(
                p.x as i64, p.y as i64,
            ));
        }
        match (self, platform) {
            (Action::Scroll(Scroll::Swipe { .. }), Platform::Web)
            | (Action::Scroll(Scroll::Direction(_)), Platform::Mobile)
            | (Action::Launch(LaunchTarget::Url(_)), Platform::Mobile)
            | (Action::Launch(LaunchTarget::App(_)), Platform::Web) => {
                Err(ActionParseError::PlatformInvalid {
                    verb: self.kind().name(),
                    platform,
                })
            }
            (Action::Hotkey(keys), _) if keys.is_empty() || keys.len() > MAX_HOTKEYS => {
                Err(ActionParseError::HotkeyCount(keys.len()))
            }
            _ => Ok(()),
        }
    }
}

fn write_quoted(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    f.write_str("'")?;
    for c in s.chars() {
        if c == '\\' || c == '\'' {
            f.write_str("\\")?;
        }
        write!(f, "{c}")?;
    }
    f.write_str("'")
}

fn write_point(f: &mut fmt::Formatter<'_>, p: Point) -> fmt::Result {
    write!(f, "({}, {})", p.x, p.y)
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.kind().name())?;
        match self {
            Action::Click(p) | Action::LongPress(p) | Action::Hover(p) | Action::DoubleClick(p) => {
                f.write_str("box=")?;
                write_point(f, *p)?;
            }
            Action::Drag { start, end } | Action::Scroll(Scroll::Swipe { start, end }) => {
                f.write_str("start=")?;
                write_point(f, *start)?;
                f.write_str(", end=")?;
                write_point(f, *end)?;
            }
            Action::Scroll(Scroll::Direction(d)) => {
                f.write_str("direction=")?;
                write_quoted(f, d.as_str())?;
            }
            Action::Type(s) | Action::Finished(s) | Action::CallUser(s) => {
                f.write_str("content=")?;
                write_quoted(f, s)?;
            }
            Action::Launch(LaunchTarget::App(s)) => {
                f.write_str("app=")?;
                write_quoted(f, s)?;
            }
            Action::Launch(LaunchTarget::Url(s)) => {
                f.write_str("url=")?;
                write_quoted(f, s)?;
            }
            Action::Hotkey(keys) => {
                f.write_str("keys=[")?;
                for (i, k) in keys.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write_quoted(f, k)?;
                }
                f.write_str("]")?;
            }
            Action::Wait
            | Action::PressBack
            | Action::PressHome
            | Action::PressEnter
            | Action::PressRecent => {}
        }
        f.write_str(")")
    }
}

impl Serialize for Action {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Action {
    /// Accepts the canonical text form of either platform. The two grammars
    /// never assign different meanings to the same text.
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_action(&text, Platform::Mobile)
            .or_else(|_| parse_action(&text, Platform::Web))
            .map_err(serde::de::Error::custom)
    }
}

/// Canonical text form; `parse_action(&serialize_action(a), p) == Ok(a)` for valid `a`.
pub fn serialize_action(action: &Action) -> String {
    action.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActionParseError {
    #[error("empty action text")]
    Empty,
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: &'static str },
    #[error("unknown action verb `{0}`")]
    UnknownVerb(String),
    #[error("`{verb}` does not accept argument `{arg}`")]
    UnexpectedArgument { verb: &'static str, arg: String },
    #[error("`{verb}` requires argument `{arg}`")]
    MissingArgument {
        verb: &'static str,
        arg: &'static str,
    },
    #[error("argument `{0}` given twice")]
    DuplicateArgument(String),
    #[error("argument `{arg}` has the wrong value type")]
    WrongValueType { arg: String },
    #[error("coordinate ({0}, {1}) outside [0, 1000]")]
    CoordinateOutOfRange(i64, i64),
    #[error("invalid scroll direction `{0}`")]
    BadDirection(String),
    #[error("hotkey takes 1 to 3 keys, got {0}")]
    HotkeyCount(usize),
    #[error("`{verb}` in this form is not available on {platform}")]
    PlatformInvalid {
        verb: &'static str,
        platform: Platform,
    },
    #[error("response has no <action> body")]
    MissingActionTag,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Ident(String),
    Int(i64),
    Str(String),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Equals,
}

fn lex(text: &str) -> Result<Vec<(usize, Token)>, ActionParseError> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(pos, c)) = chars.peek() {
        match c {
            c if c.is_whitespace() => {
                chars.next();
            }
            '(' | ')' | '[' | ']' | ',' | '=' => {
                chars.next();
                let tok = match c {
                    '(' => Token::LParen,
                    ')' => Token::RParen,
                    '[' => Token::LBracket,
                    ']' => Token::RBracket,
                    ',' => Token::Comma,
                    _ => Token::Equals,
                };
                out.push((pos, tok));
            }
            '\'' | '"' => {
                let quote = c;
                chars.next();
                let mut s = String::new();
                let mut closed = false;
                while let Some((_, ch)) = chars.next() {
                    if ch == quote {
                        closed = true;
                        break;
                    }
                    if ch == '\\' {
                        match chars.next() {
                            Some((_, e)) if e == '\\' || e == '\'' || e == '"' => s.push(e),
                            Some((_, e)) => {
                                s.push('\\');
                                s.push(e);
                            }
                            None => break,
                        }
                    } else {
                        s.push(ch);
                    }
                }
                if !closed {
                    return Err(ActionParseError::Syntax {
                        pos,
                        msg: "unterminated string",
                    });
                }
                out.push((pos, Token::Str(s)));
            }
            '-' | '0'..='9' => {
                let start = pos;
                chars.next();
                let mut end = start + c.len_utf8();
                while let Some(&(p, d)) = chars.peek() {
                    if d.is_ascii_digit() {
                        chars.next();
                        end = p + 1;
                    } else {
                        break;
                    }
                }
                let lit = &text[start..end];
                let value: i64 = lit.parse().map_err(|_| ActionParseError::Syntax {
                    pos,
                    msg: "malformed integer",
                })?;
                out.push((pos, Token::Int(value)));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = pos;
                let mut end = pos;
                while let Some(&(p, d)) = chars.peek() {
                    if d.is_ascii_alphanumeric() || d == '_' {
                        chars.next();
                        end = p + 1;
                    } else {
                        break;
                    }
                }
                out.push((start, Token::Ident(text[start..end].to_string())));
            }
            _ => {
                return Err(ActionParseError::Syntax {
                    pos,
                    msg: "unexpected character",
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Value {
    Pair(i64, i64),
    Text(String),
    List(Vec<String>),
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn here(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.end, |(p, _)| *p)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        t
    }

    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn expect(&mut self, want: Token, msg: &'static str) -> Result<(), ActionParseError> {
        let pos = self.here();
        match self.next() {
            Some(t) if t == want => Ok(()),
            _ => Err(ActionParseError::Syntax { pos, msg }),
        }
    }

    fn value(&mut self) -> Result<Value, ActionParseError> {
        let pos = self.here();
        match self.next() {
            Some(Token::Str(s)) => Ok(Value::Text(s)),
            Some(Token::LParen) => {
                let x = self.int()?;
                self.expect(Token::Comma, "expected `,` in coordinate pair")?;
                let y = self.int()?;
                self.expect(Token::RParen, "expected `)` closing coordinate pair")?;
                Ok(Value::Pair(x, y))
            }
            Some(Token::LBracket) => {
                let mut items = Vec::new();
                if self.peek() == Some(&Token::RBracket) {
                    self.next();
                    return Ok(Value::List(items));
                }
                loop {
                    let p = self.here();
                    match self.next() {
                        Some(Token::Str(s)) => items.push(s),
                        _ => {
                            return Err(ActionParseError::Syntax {
                                pos: p,
                                msg: "expected quoted list item",
                            })
                        }
                    }
                    let p = self.here();
                    match self.next() {
                        Some(Token::Comma) => continue,
                        Some(Token::RBracket) => break,
                        _ => {
                            return Err(ActionParseError::Syntax {
                                pos: p,
                                msg: "expected `,` or `]` in list",
                            })
                        }
                    }
                }
                Ok(Value::List(items))
            }
            _ => Err(ActionParseError::Syntax {
                pos,
                msg: "expected a value",
            }),
        }
    }

    fn int(&mut self) -> Result<i64, ActionParseError> {
        let pos = self.here();
        match self.next() {
            Some(Token::Int(v)) => Ok(v),
            _ => Err(ActionParseError::Syntax {
                pos,
                msg: "expected an integer",
            }),
        }
    }
}

struct Args {
    verb: &'static str,
    items: Vec<(String, Value)>,
}

impl Args {
    fn take(&mut self, name: &str) -> Option<Value> {
        let i = self.items.iter().position(|(k, _)| k == name)?;
        Some(self.items.remove(i).1)
    }

    fn finish(self) -> Result<(), ActionParseError> {
        match self.items.into_iter().next() {
            Some((arg, _)) => Err(ActionParseError::UnexpectedArgument {
                verb: self.verb,
                arg,
            }),
            None => Ok(()),
        }
    }

    fn point(&mut self, name: &'static str) -> Result<Point, ActionParseError> {
        match self.take(name) {
            Some(Value::Pair(x, y)) => {
                let in_range = |v: i64| (0..=COORD_MAX as i64).contains(&v);
                if in_range(x) && in_range(y) {
                    Ok(Point::new(x as i32, y as i32))
                } else {
                    Err(ActionParseError::CoordinateOutOfRange(x, y))
                }
            }
            Some(_) => Err(ActionParseError::WrongValueType { arg: name.into() }),
            None => Err(ActionParseError::MissingArgument {
                verb: self.verb,
                arg: name,
            }),
        }
    }

    fn text(&mut self, name: &'static str) -> Result<Option<String>, ActionParseError> {
        match self.take(name) {
            Some(Value::Text(s)) => Ok(Some(s)),
            Some(_) => Err(ActionParseError::WrongValueType { arg: name.into() }),
            None => Ok(None),
        }
    }

    fn required_text(&mut self, name: &'static str) -> Result<String, ActionParseError> {
        self.text(name)?.ok_or(ActionParseError::MissingArgument {
            verb: self.verb,
            arg: name,
        })
    }

    fn has(&self, name: &str) -> bool {
        self.items.iter().any(|(k, _)| k == name)
    }
}

fn parse_direction(s: &str) -> Result<ScrollDirection, ActionParseError> {
    match s.trim().to_ascii_lowercase().as_str() {
        "up" => Ok(ScrollDirection::Up),
        "down" => Ok(ScrollDirection::Down),
        _ => Err(ActionParseError::BadDirection(s.to_string())),
    }
}

/// Parse one action in the grammar of `platform`.
///
/// Rejects unknown verbs, unknown or duplicate keyword arguments, missing
/// required arguments, out-of-range coordinates and forms that do not exist
/// on the platform. Never panics.
pub fn parse_action(text: &str, platform: Platform) -> Result<Action, ActionParseError> {
    let text = text.trim();
    if text.is_empty() {
        return Err(ActionParseError::Empty);
    }
    let tokens = lex(text)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        end: text.len(),
    };
    let verb_pos = p.here();
    let verb = match p.next() {
        Some(Token::Ident(v)) => v,
        _ => {
            return Err(ActionParseError::Syntax {
                pos: verb_pos,
                msg: "expected an action verb",
            })
        }
    };
    let kind = ActionKind::from_verb(&verb).ok_or(ActionParseError::UnknownVerb(verb))?;
    p.expect(Token::LParen, "expected `(` after verb")?;

    let mut items: Vec<(String, Value)> = Vec::new();
    if p.peek() == Some(&Token::RParen) {
        p.next();
    } else {
        loop {
            let pos = p.here();
            let name = match p.next() {
                Some(Token::Ident(n)) => n,
                _ => {
                    return Err(ActionParseError::Syntax {
                        pos,
                        msg: "expected argument name",
                    })
                }
            };
            p.expect(Token::Equals, "expected `=` after argument name")?;
            let value = p.value()?;
            if items.iter().any(|(k, _)| *k == name) {
                return Err(ActionParseError::DuplicateArgument(name));
            }
            items.push((name, value));
            let pos = p.here();
            match p.next() {
                Some(Token::Comma) => continue,
                Some(Token::RParen) => break,
                _ => {
                    return Err(ActionParseError::Syntax {
                        pos,
                        msg: "expected `,` or `)`",
                    })
                }
            }
        }
    }
    if p.peek().is_some() {
        return Err(ActionParseError::Syntax {
            pos: p.here(),
            msg: "trailing input after action",
        });
    }

    let mut args = Args {
        verb: kind.name(),
        items,
    };
    let action = match kind {
        ActionKind::Click => Action::Click(args.point("box")?),
        ActionKind::LongPress => Action::LongPress(args.point("box")?),
        ActionKind::Hover => Action::Hover(args.point("box")?),
        ActionKind::DoubleClick => Action::DoubleClick(args.point("box")?),
        ActionKind::Drag => Action::Drag {
            start: args.point("start")?,
            end: args.point("end")?,
        },
        ActionKind::Scroll => match platform {
            Platform::Mobile => {
                if !args.has("start") && !args.has("end") {
                    return Err(ActionParseError::PlatformInvalid {
                        verb: kind.name(),
                        platform,
                    });
                }
                let start = args.point("start")?;
                let end = args.point("end")?;
                // The direction hint is accepted but carries no information beyond the swipe.
                if let Some(d) = args.text("direction")? {
                    if !matches!(
                        d.trim().to_ascii_lowercase().as_str(),
                        "up" | "down" | "left" | "right"
                    ) {
                        return Err(ActionParseError::BadDirection(d));
                    }
                }
                Action::Scroll(Scroll::Swipe { start, end })
            }
            Platform::Web => {
                if args.has("start") || args.has("end") {
                    return Err(ActionParseError::PlatformInvalid {
                        verb: kind.name(),
                        platform,
                    });
                }
                let d = args.required_text("direction")?;
                Action::Scroll(Scroll::Direction(parse_direction(&d)?))
            }
        },
        ActionKind::Type => Action::Type(args.required_text("content")?),
        ActionKind::Launch => match platform {
            Platform::Mobile => Action::Launch(LaunchTarget::App(args.required_text("app")?)),
            Platform::Web => Action::Launch(LaunchTarget::Url(args.required_text("url")?)),
        },
        ActionKind::Finished => Action::Finished(args.text("content")?.unwrap_or_default()),
        ActionKind::CallUser => Action::CallUser(args.text("content")?.unwrap_or_default()),
        ActionKind::Hotkey => match args.take("keys") {
            Some(Value::List(keys)) => Action::Hotkey(keys),
            Some(_) => return Err(ActionParseError::WrongValueType { arg: "keys".into() }),
            None => {
                return Err(ActionParseError::MissingArgument {
                    verb: kind.name(),
                    arg: "keys",
                })
            }
        },
        ActionKind::Wait => Action::Wait,
        ActionKind::PressBack => Action::PressBack,
        ActionKind::PressHome => Action::PressHome,
        ActionKind::PressEnter => Action::PressEnter,
        ActionKind::PressRecent => Action::PressRecent,
    };
    args.finish()?;
    action.validate(platform)?;
    Ok(action)
}

/// A parsed agent turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentResponse {
    pub think: String,
    pub action_text: String,
    pub conclusion: String,
    pub action: Result<Action, ActionParseError>,
    /// All three tags present exactly once, in order, with nothing outside them.
    pub format_ok: bool,
}

impl AgentResponse {
    pub fn is_parseable(&self) -> bool {
        self.action.is_ok()
    }
}

const TAGS: [&str; 3] = ["think", "action", "conclusion"];

fn tag_body<'a>(raw: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = raw.find(&open)? + open.len();
    let len = raw[start..].find(&close)?;
    Some(&raw[start..start + len])
}

fn envelope_is_strict(raw: &str) -> bool {
    for tag in TAGS {
        if raw.matches(&format!("<{tag}>")).count() != 1
            || raw.matches(&format!("</{tag}>")).count() != 1
        {
            return false;
        }
    }
    let mut rest = raw.trim();
    for tag in TAGS {
        let open = format!("<{tag}>");
        let close = format!("</{tag}>");
        rest = match rest.strip_prefix(&open) {
            Some(r) => r,
            None => return false,
        };
        rest = match rest.find(&close) {
            Some(i) => rest[i + close.len()..].trim_start(),
            None => return false,
        };
    }
    rest.is_empty()
}

/// Split a raw agent turn into its tagged parts and parse the action body.
///
/// Never fails: a malformed envelope only clears `format_ok`, and action
/// parsing is attempted on whatever `<action>` body can be found.
pub fn parse_response(raw: &str, platform: Platform) -> AgentResponse {
    let format_ok = envelope_is_strict(raw);
    let think = tag_body(raw, "think")
        .unwrap_or_default()
        .trim()
        .to_string();
    let conclusion = tag_body(raw, "conclusion")
        .unwrap_or_default()
        .trim()
        .to_string();
    let (action_text, action) = match tag_body(raw, "action") {
        Some(body) => {
            let body = body.trim();
            (body.to_string(), parse_action(body, platform))
        }
        None => (String::new(), Err(ActionParseError::MissingActionTag)),
    };
    AgentResponse {
        think,
        action_text,
        conclusion,
        action,
        format_ok,
    }
}

/// Render a well-formed three-tag response around `action`.
pub fn render_response(think: &str, action: &Action, conclusion: &str) -> String {
    format!("<think>{think}</think><action>{action}</action><conclusion>{conclusion}</conclusion>")
}

/// Output of a grounding query: a point, or the `[-1,-1]` refusal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroundingAnswer {
    Point(Point),
    Refusal,
}

/// Parse a grounding answer of the form `[x,y]`; `None` on any format error.
pub fn parse_grounding(text: &str) -> Option<GroundingAnswer> {
    let inner = text.trim().strip_prefix('[')?.strip_suffix(']')?;
    let (a, b) = inner.split_once(',')?;
    let x: i64 = a.trim().parse().ok()?;
    let y: i64 = b.trim().parse().ok()?;
    if (x, y) == (-1, -1) {
        return Some(GroundingAnswer::Refusal);
    }
    let in_range = |v: i64| (0..=COORD_MAX as i64).contains(&v);
    (in_range(x) && in_range(y)).then(|| GroundingAnswer::Point(Point::new(x as i32, y as i32)))
}

impl fmt::Display for GroundingAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroundingAnswer::Point(p) => write!(f, "[{},{}]", p.x, p.y),
            GroundingAnswer::Refusal => f.write_str("[-1,-1]"),
        }
    }
}
