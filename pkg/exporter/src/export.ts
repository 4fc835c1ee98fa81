/**
 * Patch-directory to bag-file conversion.
 *
 * The exporter never sees labels or split assignments; it emits one MILB
 * bag plus a manifest entry fragment, and labels are attached manifest-side
 * by whoever owns the dataset.
 */

import * as fs from 'fs'
import * as path from 'path'

import { loadEncoder } from './extractor'
import { readImage, RgbImage } from './image'
import { Bag, encodeBag } from './milb'

export interface ExportJob {
  model: string
  patchDir: string
  outPath: string
  batchSize: number
}

export interface ExportResult {
  nPatches: number
  dim: number
  extractorId: string
  entryPath: string
}

const COORD_PATTERN = /x(\d+)[_.-]?y(\d+)/i

interface PatchFile {
  file: string
  x: number
  y: number
}

export function listPatchFiles(patchDir: string): PatchFile[] {
  let names: string[]
  try {
    names = fs.readdirSync(patchDir)
  } catch {
    throw new Error(`cannot read patch directory '${patchDir}'`)
  }
  const patches: PatchFile[] = []
  for (const name of names.sort()) {
    const lower = name.toLowerCase()
    if (!lower.endsWith('.png') && !lower.endsWith('.ppm')) continue
    const match = COORD_PATTERN.exec(name)
    if (!match) {
      throw new Error(`cannot parse patch coordinates from '${name}' (expected x<int>_y<int>)`)
    }
    patches.push({
      file: path.join(patchDir, name),
      x: parseInt(match[1], 10),
      y: parseInt(match[2], 10),
    })
  }
  if (patches.length === 0) {
    throw new Error(`no patch images (.png or .ppm) in '${patchDir}'`)
  }
  // Row-major, the same order the tiling side enumerates a grid.
  patches.sort((a, b) => a.y - b.y || a.x - b.x)
  for (let i = 1; i < patches.length; i++) {
    if (patches[i].x === patches[i - 1].x && patches[i].y === patches[i - 1].y) {
      throw new Error(`duplicate patch coordinate (${patches[i].x}, ${patches[i].y})`)
    }
  }
  return patches
}

export async function exportBag(job: ExportJob): Promise<ExportResult> {
  if (!Number.isInteger(job.batchSize) || job.batchSize < 1) {
    throw new Error(`batch size must be a positive integer, got ${job.batchSize}`)
  }
  const encoder = loadEncoder(job.model)
  const patches = listPatchFiles(job.patchDir)

  const embeddings: Float32Array[] = []
  for (let start = 0; start < patches.length; start += job.batchSize) {
    const batch: RgbImage[] = patches
      .slice(start, start + job.batchSize)
      .map(p => readImage(p.file))
    embeddings.push(...encoder.embedBatch(batch))
  }

  const bag: Bag = {
    coords: patches.map(p => [p.x, p.y] as [number, number]),
    embeddings,
  }
  fs.writeFileSync(job.outPath, encodeBag(bag))

  const entryPath = job.outPath.replace(/\.[^.]+$/, '') + '.entry.json'
  const entry = {
    bag: path.basename(job.outPath),
    dim: encoder.dim,
    extractor_id: encoder.id,
    n_patches: patches.length,
  }
  fs.writeFileSync(entryPath, JSON.stringify(entry, Object.keys(entry).sort(), 2) + '\n')
  return {
    nPatches: patches.length,
    dim: encoder.dim,
    extractorId: encoder.id,
    entryPath,
  }
}
