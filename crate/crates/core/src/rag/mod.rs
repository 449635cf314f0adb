//! Retrieval: hashing embedder, exact cosine index, and prompt assembly.

pub mod embed;
pub mod index;
pub mod prompt;

pub use embed::{cosine, embed, Embedder, HashingEmbedder, Vector, EMBEDDING_DIMS};
pub use index::{
    Chunk, Collection, ExactIndex, RetrievalResult, VectorIndex, DEFAULT_THRESHOLD, DEFAULT_TOP_K,
};
pub use prompt::{assemble_prompt, PromptTemplate, TEACHING_ASSISTANT_TEMPLATE};
