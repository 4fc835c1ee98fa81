/**
 * Patch encoders. The only built-in is a deterministic stand-in for a real
 * foundation encoder: fixed pixel statistics followed by a fixed random
 * projection, so exports are byte-reproducible anywhere. The encoder id
 * string records the full preprocessing so downstream manifests can tell
 * embeddings from different encoders apart.
 */

import { RgbImage } from './image'

export interface PatchEncoder {
  /** Recorded as the manifest extractor_id; names model and preprocessing. */
  id: string
  dim: number
  embedBatch(patches: RgbImage[]): Float32Array[]
}

const GRID = 4
const DESCRIPTOR_SIZE = 3 * 4 + 2 * 3 + GRID * GRID // channel stats, gradients, gray grid

/** Standard 32-bit mixer; deterministic sequence in [0, 1). */
function mulberry32(seed: number): () => number {
  let a = seed >>> 0
  return () => {
    a = (a + 0x6d2b79f5) >>> 0
    let t = a
    t = Math.imul(t ^ (t >>> 15), t | 1)
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61)
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296
  }
}

function fnv1a(text: string): number {
  let h = 0x811c9dc5
  for (let i = 0; i < text.length; i++) {
    h ^= text.charCodeAt(i)
    h = Math.imul(h, 0x01000193)
  }
  return h >>> 0
}

/** Channel means/stds/extremes, mean axis gradients, 4x4 gray cell means. */
export function describePatch(img: RgbImage): Float64Array {
  const { width: w, height: h, pixels } = img
  const out = new Float64Array(DESCRIPTOR_SIZE)
  const n = w * h
  let k = 0
  for (let c = 0; c < 3; c++) {
    let sum = 0
    let sumSq = 0
    let min = 255
    let max = 0
    for (let p = 0; p < n; p++) {
      const v = pixels[p * 3 + c]
      sum += v
      sumSq += v * v
      if (v < min) min = v
      if (v > max) max = v
    }
    const mean = sum / n
    out[k++] = mean / 255
    out[k++] = Math.sqrt(Math.max(sumSq / n - mean * mean, 0)) / 255
    out[k++] = min / 255
    out[k++] = max / 255
  }
  for (let c = 0; c < 3; c++) {
    let dx = 0
    let dy = 0
    for (let y = 0; y < h; y++) {
      for (let x = 0; x < w; x++) {
        const v = pixels[(y * w + x) * 3 + c]
        if (x + 1 < w) dx += pixels[(y * w + x + 1) * 3 + c] - v
        if (y + 1 < h) dy += pixels[((y + 1) * w + x) * 3 + c] - v
      }
    }
    out[k++] = w > 1 ? dx / ((w - 1) * h * 255) : 0
    out[k++] = h > 1 ? dy / (w * (h - 1) * 255) : 0
  }
  for (let gy = 0; gy < GRID; gy++) {
    for (let gx = 0; gx < GRID; gx++) {
      const x0 = Math.floor((gx * w) / GRID)
      const x1 = Math.max(Math.floor(((gx + 1) * w) / GRID), x0 + 1)
      const y0 = Math.floor((gy * h) / GRID)
      const y1 = Math.max(Math.floor(((gy + 1) * h) / GRID), y0 + 1)
      let sum = 0
      for (let y = y0; y < Math.min(y1, h); y++) {
        for (let x = x0; x < Math.min(x1, w); x++) {
          const p = (y * w + x) * 3
          sum += 0.299 * pixels[p] + 0.587 * pixels[p + 1] + 0.114 * pixels[p + 2]
        }
      }
      const cells = Math.max((Math.min(y1, h) - y0) * (Math.min(x1, w) - x0), 1)
      out[k++] = sum / cells / 255
    }
  }
  return out
}

function toyEncoder(dim: number): PatchEncoder {
  const id = `toy-v1(rgb-u8;stats${DESCRIPTOR_SIZE};proj${dim})`
  const next = mulberry32(fnv1a(id))
  const scale = 1 / Math.sqrt(DESCRIPTOR_SIZE)
  const projection = new Float64Array(dim * DESCRIPTOR_SIZE)
  for (let i = 0; i < projection.length; i++) {
    projection[i] = (2 * next() - 1) * scale
  }
  return {
    id,
    dim,
    embedBatch(patches: RgbImage[]): Float32Array[] {
      return patches.map(patch => {
        const desc = describePatch(patch)
        const row = new Float32Array(dim)
        for (let i = 0; i < dim; i++) {
          let acc = 0
          for (let j = 0; j < DESCRIPTOR_SIZE; j++) {
            acc += projection[i * DESCRIPTOR_SIZE + j] * desc[j]
          }
          row[i] = Math.fround(acc)
        }
        return row
      })
    },
  }
}

export function loadEncoder(model: string): PatchEncoder {
  if (model === 'toy-v1') return toyEncoder(64)
  const sized = /^toy-v1:(\d+)$/.exec(model)
  if (sized) {
    const dim = parseInt(sized[1], 10)
    if (dim < 1) throw new Error(`model load failure: bad dimension in '${model}'`)
    return toyEncoder(dim)
  }
  throw new Error(`model load failure: unknown model '${model}'`)
}
