use std::sync::Mutex;

use serde_json::Value;

use super::wire::{self, Transport};
use super::{Embedding, EmbeddingOracle, OracleError};
use crate::image::Image;

/// Client for an embedding model behind the line protocol.
///
/// The first response fixes the embedding length; any later response of a
/// different length is an error, never retried.
pub struct ExternalEmbedding {
    transport: Mutex<Box<dyn Transport>>,
    dim: Mutex<Option<usize>>,
    input_size: Option<(usize, usize)>,
}

impl ExternalEmbedding {
    pub fn new(transport: Box<dyn Transport>, input_size: Option<(usize, usize)>) -> Self {
        Self {
            transport: Mutex::new(transport),
            dim: Mutex::new(None),
            input_size,
        }
    }

    fn parse(&self, reply: &Value) -> Result<Embedding, OracleError> {
        wire::check_error(reply)?;
        let values: Vec<f64> = reply
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| OracleError::Malformed("missing embedding array".into()))?
            .iter()
            .map(|v| {
                v.as_f64()
                    .filter(|f| f.is_finite())
                    .ok_or_else(|| OracleError::Malformed(format!("non-numeric entry {v}")))
            })
            .collect::<Result<_, _>>()?;
        if values.is_empty() {
            return Err(OracleError::Malformed("empty embedding".into()));
        }
        let mut dim = self.dim.lock().expect("dim lock");
        match *dim {
            Some(d) if d != values.len() => return Err(OracleError::LengthMismatch(values.len(), d)),
            Some(_) => {}
            None => *dim = Some(values.len()),
        }
        Ok(Embedding::from_values(values))
    }
}

impl EmbeddingOracle for ExternalEmbedding {
    fn embed(&self, img: &Image) -> Result<Embedding, OracleError> {
        if let Some((h, w)) = self.input_size {
            if img.height() != h || img.width() != w {
                return Err(OracleError::WrongSize {
                    got_w: img.width(),
                    got_h: img.height(),
                    want_w: w,
                    want_h: h,
                });
            }
        }
        let request = wire::image_request("embed", img);
        let reply = self.transport.lock().expect("transport lock").call(&request)?;
        self.parse(&reply)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    struct Scripted(Vec<Value>);

    impl Transport for Scripted {
        fn call(&mut self, request: &Value) -> Result<Value, OracleError> {
            assert_eq!(request["op"], "embed");
            Ok(self.0.remove(0))
        }
    }

    fn client(replies: Vec<Value>) -> ExternalEmbedding {
        ExternalEmbedding::new(Box::new(Scripted(replies)), None)
    }

    #[test]
    fn takes_responses_as_is() {
        let c = client(vec![json!({"embedding": [0.6, 0.8]}), json!({"embedding": [3.0, 4.0]})]);
        let img = Image::filled(2, 2, [0.5; 3]);
        let a = c.embed(&img).unwrap();
        assert_eq!(a.values, vec![0.6, 0.8]);
        assert!(a.unit_norm);
        let b = c.embed(&img).unwrap();
        assert_eq!(b.values, vec![3.0, 4.0]);
        assert!(!b.unit_norm);
    }

    #[test]
    fn length_change_fails_loudly() {
        let c = client(vec![json!({"embedding": [1.0, 0.0]}), json!({"embedding": [1.0]})]);
        let img = Image::filled(2, 2, [0.5; 3]);
        c.embed(&img).unwrap();
        assert!(matches!(c.embed(&img), Err(OracleError::LengthMismatch(1, 2))));
    }

    #[test]
    fn error_and_malformed_replies() {
        let c = client(vec![
            json!({"error": "model not loaded"}),
            json!({"vector": [1]}),
            json!({"embedding": ["x"]}),
        ]);
        let img = Image::filled(2, 2, [0.5; 3]);
        assert!(matches!(c.embed(&img), Err(OracleError::Remote(m)) if m == "model not loaded"));
        assert!(matches!(c.embed(&img), Err(OracleError::Malformed(_))));
        assert!(matches!(c.embed(&img), Err(OracleError::Malformed(_))));
    }

    #[test]
    fn enforces_input_size() {
        let c = ExternalEmbedding::new(Box::new(Scripted(vec![])), Some((4, 4)));
        assert!(matches!(
            c.embed(&Image::filled(2, 2, [0.0; 3])),
            Err(OracleError::WrongSize { .. })
        ));
    }
}
