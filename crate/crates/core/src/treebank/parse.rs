use super::{Granularity, PhraseNode, PhraseTree, Result, SentimentLabel, TreebankError};

pub(super) fn parse_ptb(text: &str) -> Result<PhraseTree> {
    let mut p = Parser {
        src: text.as_bytes(),
        text,
        pos: 0,
        nodes: Vec::new(),
        tokens: Vec::new(),
    };
    p.skip_ws();
    p.tree()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.error("unexpected input after the tree"));
    }
    Ok(PhraseTree {
        nodes: p.nodes,
        tokens: p.tokens,
    })
}

struct Parser<'a> {
    src: &'a [u8],
    text: &'a str,
    pos: usize,
    nodes: Vec<PhraseNode>,
    tokens: Vec<String>,
}

enum Child {
    Word(String),
    Tree(usize),
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> TreebankError {
        TreebankError::Parse {
            offset: self.pos,
            msg: msg.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    /// A maximal run of bytes that are neither whitespace nor parentheses.
    fn atom(&mut self) -> &str {
        let start = self.pos;
        while let Some(b) = self.peek() {
            if b.is_ascii_whitespace() || b == b'(' || b == b')' {
                break;
            }
            self.pos += 1;
        }
        // Delimiters are ASCII, so the slice stays on char boundaries.
        &self.text[start..self.pos]
    }

    fn tree(&mut self) -> Result<usize> {
        let open = self.pos;
        if self.peek() != Some(b'(') {
            return Err(self.error("expected `(`"));
        }
        self.pos += 1;
        self.skip_ws();

        let label_at = self.pos;
        let raw = self.atom().to_string();
        if raw.is_empty() {
            return Err(self.error("expected a label"));
        }
        let label = raw
            .parse::<u8>()
            .ok()
            .and_then(|v| SentimentLabel::new(v, Granularity::Five))
            .ok_or(TreebankError::Label {
                offset: label_at,
                label: raw,
            })?;

        let id = self.nodes.len();
        self.nodes.push(PhraseNode {
            id,
            span: (0, 0),
            label: Some(label),
            left: None,
            right: None,
        });

        let mut children = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                None => return Err(self.error("unbalanced parentheses: missing `)`")),
                Some(b')') => {
                    self.pos += 1;
                    break;
                }
                Some(b'(') => children.push(Child::Tree(self.tree()?)),
                Some(_) => children.push(Child::Word(self.atom().to_string())),
            }
        }

        match children.as_slice() {
            [Child::Word(w)] => {
                self.tokens.push(w.clone());
                let t = self.tokens.len();
                self.nodes[id].span = (t, t);
            }
            [Child::Tree(l), Child::Tree(r)] => {
                let (l, r) = (*l, *r);
                self.nodes[id].span = (self.nodes[l].span.0, self.nodes[r].span.1);
                self.nodes[id].left = Some(l);
                self.nodes[id].right = Some(r);
            }
            [] => {
                return Err(TreebankError::Parse {
                    offset: open,
                    msg: "empty node".into(),
                })
            }
            kids if kids.iter().all(|c| matches!(c, Child::Tree(_))) => {
                return Err(TreebankError::Arity {
                    offset: open,
                    children: kids.len(),
                })
            }
            _ => {
                return Err(TreebankError::Parse {
                    offset: open,
                    msg: "a node holds either one word or two subtrees".into(),
                })
            }
        }
        Ok(id)
    }
}
