import json
import logging
from pathlib import Path
from typing import Dict, List, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from config import (CORPUS_ANNOTATIONS_FILE, CORPUS_FORMAT_VERSION, CORPUS_IMAGES_DIR,
                    CORPUS_META_FILE)
from data.synth_corpus import Corpus, ScannerStylePreset, Slide
from utils.domain_types import GroundTruthBox, ScannerDomain
from utils.error_handler import CorpusFormatError, InvalidDomain


class CorpusStore:
    """On-disk corpus: meta.json, annotations.json and one PNG per slide"""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    @property
    def meta_path(self) -> Path:
        return self.root / CORPUS_META_FILE

    @property
    def annotations_path(self) -> Path:
        return self.root / CORPUS_ANNOTATIONS_FILE

    @property
    def images_dir(self) -> Path:
        return self.root / CORPUS_IMAGES_DIR

    def image_path(self, slide_id: str) -> Path:
        return self.images_dir / f"{slide_id}.png"

    def ensure_directory_exists(self):
        """Create corpus directories if they don't exist"""
        self.images_dir.mkdir(parents=True, exist_ok=True)

    def write(self, corpus: Corpus) -> Path:
        self.ensure_directory_exists()

        meta = {
            'format_version': CORPUS_FORMAT_VERSION,
            'patch_size': corpus.patch_size,
            'presets': [p.to_dict() for p in corpus.presets],
            'corpus_seed': corpus.corpus_seed,
        }
        annotations = {}
        for slide in corpus.slides:
            Image.fromarray(slide.image).save(self.image_path(slide.slide_id), format='PNG')
            annotations[slide.slide_id] = {
                'scanner': slide.scanner.id,
                'mitoses': [[m.x, m.y] for m in slide.mitoses],
            }

        self._write_json(self.meta_path, meta)
        self._write_json(self.annotations_path, annotations)
        logging.info(f"Wrote corpus of {len(corpus.slides)} slides to {self.root}")
        return self.root

    def read(self) -> Corpus:
        meta = self._read_json(self.meta_path)
        annotations = self._read_json(self.annotations_path)

        try:
            version = int(meta['format_version'])
            patch_size = int(meta['patch_size'])
            presets = tuple(ScannerStylePreset.from_dict(p) for p in meta['presets'])
            corpus_seed = int(meta['corpus_seed'])
        except (KeyError, TypeError, ValueError) as e:
            raise CorpusFormatError(self.meta_path, f"invalid meta entry: {e}")
        if version != CORPUS_FORMAT_VERSION:
            raise CorpusFormatError(self.meta_path, f"unsupported format_version {version}")
        if not isinstance(annotations, dict):
            raise CorpusFormatError(self.annotations_path, "expected a mapping of slide ids")

        slides: List[Slide] = []
        for slide_id in sorted(annotations):
            slides.append(self._read_slide(slide_id, annotations[slide_id]))

        logging.info(f"Read corpus of {len(slides)} slides from {self.root}")
        return Corpus(slides=slides, corpus_seed=corpus_seed, patch_size=patch_size,
                      presets=presets, format_version=version)

    def _read_slide(self, slide_id: str, entry: Dict) -> Slide:
        try:
            scanner = ScannerDomain(entry['scanner'])
            mitoses = [GroundTruthBox(float(x), float(y)) for x, y in entry['mitoses']]
        except InvalidDomain as e:
            raise CorpusFormatError(self.annotations_path, f"slide {slide_id}: {e}")
        except (KeyError, TypeError, ValueError) as e:
            raise CorpusFormatError(self.annotations_path, f"slide {slide_id}: malformed entry ({e})")

        path = self.image_path(slide_id)
        try:
            with Image.open(path) as img:
                image = np.array(img.convert('RGB'), dtype=np.uint8)
        except FileNotFoundError:
            raise CorpusFormatError(path, "missing slide image")
        except (UnidentifiedImageError, OSError) as e:
            raise CorpusFormatError(path, f"unreadable slide image ({e})")
        return Slide(image=image, slide_id=slide_id, scanner=scanner, mitoses=mitoses)

    @staticmethod
    def _write_json(path: Path, data) -> None:
        with open(path, 'w') as f:
            json.dump(data, f, indent=2, sort_keys=True)

    @staticmethod
    def _read_json(path: Path):
        try:
            with open(path, 'r') as f:
                return json.load(f)
        except FileNotFoundError:
            raise CorpusFormatError(path, "missing file")
        except json.JSONDecodeError as e:
            raise CorpusFormatError(path, f"corrupt JSON ({e})")


def write_corpus(corpus: Corpus, directory: Union[str, Path]) -> Path:
    return CorpusStore(directory).write(corpus)


def read_corpus(directory: Union[str, Path]) -> Corpus:
    return CorpusStore(directory).read()
