//! The XDF topology subset: `<XDF name>` holding `<Instance>` elements (one
//! `<Class>` and any number of `<Parameter>` children) and `<Connection>`
//! elements.

use std::fmt::Write;

use quick_xml::escape::escape;
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;

use crate::sim::{ActorSkeleton, Connection, GraphSkeleton};

use super::CodegenError;

pub fn write_topology(g: &GraphSkeleton) -> String {
    let mut s = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(s, "<XDF name=\"{}\">", escape(&g.name));
    for a in &g.actors {
        let _ = writeln!(s, "  <Instance id=\"{}\">", escape(&a.name));
        let _ = writeln!(s, "    <Class name=\"{}\"/>", escape(&a.class));
        for (k, v) in &a.params {
            let _ = writeln!(s, "    <Parameter name=\"{}\" value=\"{}\"/>", escape(k), escape(v));
        }
        s.push_str("  </Instance>\n");
    }
    for c in &g.connections {
        let _ = writeln!(
            s,
            "  <Connection src=\"{}\" src-port=\"{}\" dst=\"{}\" dst-port=\"{}\"/>",
            escape(&c.src),
            escape(&c.src_port),
            escape(&c.dst),
            escape(&c.dst_port)
        );
    }
    s.push_str("</XDF>\n");
    s
}

struct Parser<'a> {
    text: &'a str,
    reader: Reader<&'a [u8]>,
}

impl<'a> Parser<'a> {
    fn line(&self) -> usize {
        let pos = (self.reader.buffer_position() as usize).min(self.text.len());
        self.text.as_bytes()[..pos].iter().filter(|&&b| b == b'\n').count() + 1
    }

    fn err(&self, element: &str, msg: impl std::fmt::Display) -> CodegenError {
        CodegenError::SchemaViolation(format!("line {}, <{element}>: {msg}", self.line()))
    }

    fn attr(&self, e: &BytesStart, name: &str) -> Result<String, CodegenError> {
        let el = String::from_utf8_lossy(e.name().as_ref()).into_owned();
        for a in e.attributes() {
            let a = a.map_err(|x| self.err(&el, x))?;
            if a.key.as_ref() == name.as_bytes() {
                return a
                    .unescape_value()
                    .map(|v| v.into_owned())
                    .map_err(|x| self.err(&el, x));
            }
        }
        Err(self.err(&el, format!("missing attribute '{name}'")))
    }

    fn next(&mut self) -> Result<Event<'a>, CodegenError> {
        loop {
            let ev = self.reader.read_event().map_err(|e| self.err("?", e))?;
            match ev {
                Event::Decl(_) | Event::Comment(_) | Event::PI(_) | Event::DocType(_) => continue,
                Event::Text(ref t) if t.iter().all(u8::is_ascii_whitespace) => continue,
                other => return Ok(other),
            }
        }
    }
}

fn tag(e: &BytesStart) -> String {
    String::from_utf8_lossy(e.name().as_ref()).into_owned()
}

/// Parses and validates a topology. Structural validation failures report the
/// validator's message unchanged, e.g. `Port 'out' of actor 'conv0' unconnected`.
pub fn parse_topology(text: &str) -> Result<GraphSkeleton, CodegenError> {
    let mut p = Parser {
        text,
        reader: Reader::from_str(text),
    };
    let name = match p.next()? {
        Event::Start(e) if e.name().as_ref() == b"XDF" => p.attr(&e, "name")?,
        Event::Empty(e) if e.name().as_ref() == b"XDF" => {
            return Err(p.err("XDF", "document has no instances"));
        }
        _ => return Err(p.err("?", "expected root element <XDF>")),
    };
    let mut actors: Vec<ActorSkeleton> = Vec::new();
    let mut connections = Vec::new();
    loop {
        match p.next()? {
            Event::Start(e) if e.name().as_ref() == b"Instance" => {
                let id = p.attr(&e, "id")?;
                let mut class = None;
                let mut params = Vec::new();
                loop {
                    match p.next()? {
                        Event::Empty(c) if c.name().as_ref() == b"Class" => {
                            if class.is_some() {
                                return Err(p.err("Class", format!("second class for instance '{id}'")));
                            }
                            class = Some(p.attr(&c, "name")?);
                        }
                        Event::Empty(c) if c.name().as_ref() == b"Parameter" => {
                            params.push((p.attr(&c, "name")?, p.attr(&c, "value")?));
                        }
                        Event::End(c) if c.name().as_ref() == b"Instance" => break,
                        Event::Start(c) | Event::Empty(c) => {
                            return Err(p.err(&tag(&c), format!("unexpected element in instance '{id}'")));
                        }
                        Event::Eof => return Err(p.err("Instance", "unterminated instance")),
                        _ => return Err(p.err("Instance", "unexpected content")),
                    }
                }
                let class = class.ok_or_else(|| p.err("Instance", format!("instance '{id}' has no <Class>")))?;
                actors.push(ActorSkeleton { name: id, class, params });
            }
            Event::Empty(e) if e.name().as_ref() == b"Instance" => {
                return Err(p.err("Instance", "instance has no <Class>"));
            }
            Event::Empty(e) if e.name().as_ref() == b"Connection" => {
                connections.push(Connection {
                    src: p.attr(&e, "src")?,
                    src_port: p.attr(&e, "src-port")?,
                    dst: p.attr(&e, "dst")?,
                    dst_port: p.attr(&e, "dst-port")?,
                });
            }
            Event::End(e) if e.name().as_ref() == b"XDF" => break,
            Event::Start(e) | Event::Empty(e) => return Err(p.err(&tag(&e), "unexpected element")),
            Event::Eof => return Err(p.err("XDF", "unterminated document")),
            _ => return Err(p.err("XDF", "unexpected content")),
        }
    }
    match p.next()? {
        Event::Eof => {}
        _ => return Err(p.err("?", "content after </XDF>")),
    }
    let g = GraphSkeleton {
        name,
        actors,
        connections,
    };
    g.validate().map_err(CodegenError::SchemaViolation)?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(body: &str) -> String {
        format!("<XDF name=\"g\">\n{body}</XDF>\n")
    }

    #[test]
    fn minimal_round_trip() {
        let text = doc(
            "<Instance id=\"a\"><Class name=\"Source\"/><Parameter name=\"shape\" value=\"1x2x2\"/></Instance>\n\
             <Instance id=\"b&amp;c\"><Class name=\"Sink\"/></Instance>\n\
             <Connection src=\"a\" src-port=\"out\" dst=\"b&amp;c\" dst-port=\"in\"/>\n",
        );
        let g = parse_topology(&text).unwrap();
        assert_eq!(g.actors[1].name, "b&c");
        assert_eq!(parse_topology(&write_topology(&g)).unwrap(), g);
    }

    #[test]
    fn schema_errors_carry_line_and_element() {
        let text = doc("<Instance id=\"a\"><Class name=\"Source\"/></Instance>\n<Bogus/>\n");
        let msg = parse_topology(&text).unwrap_err().to_string();
        assert!(msg.contains("line 3") && msg.contains("<Bogus>"), "{msg}");
        let text = doc("<Connection src=\"a\" dst=\"b\" dst-port=\"in\"/>\n");
        assert!(parse_topology(&text).unwrap_err().to_string().contains("src-port"));
    }
}
