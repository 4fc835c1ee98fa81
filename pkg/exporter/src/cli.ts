#!/usr/bin/env node
/**
 * Command line wrapper: embed-export --model ID --patch-dir DIR --out BAG
 * [--batch-size N]. Exit 0 on success, 2 on usage errors, 1 otherwise.
 */

import { exportBag } from './export'

const USAGE =
  'usage: embed-export --model ID --patch-dir DIR --out BAG [--batch-size N]'

class UsageError extends Error {}

function parseArgs(argv: string[]): { model: string; patchDir: string; out: string; batchSize: number } {
  const values: Record<string, string> = {}
  for (let i = 0; i < argv.length; i += 2) {
    const flag = argv[i]
    if (!flag.startsWith('--')) throw new UsageError(`unexpected argument '${flag}'`)
    if (i + 1 >= argv.length) throw new UsageError(`flag ${flag} needs a value`)
    const name = flag.slice(2)
    if (!['model', 'patch-dir', 'out', 'batch-size'].includes(name)) {
      throw new UsageError(`unknown flag ${flag}`)
    }
    values[name] = argv[i + 1]
  }
  for (const required of ['model', 'patch-dir', 'out']) {
    if (!(required in values)) throw new UsageError(`missing required flag --${required}`)
  }
  const batchSize = 'batch-size' in values ? Number(values['batch-size']) : 32
  return { model: values['model'], patchDir: values['patch-dir'], out: values['out'], batchSize }
}

async function main() {
  const argv = process.argv.slice(2)
  if (argv.includes('--help') || argv.includes('-h')) {
    console.log(USAGE)
    return
  }
  const args = parseArgs(argv)
  const result = await exportBag({
    model: args.model,
    patchDir: args.patchDir,
    outPath: args.out,
    batchSize: args.batchSize,
  })
  console.log(
    `wrote ${args.out}: ${result.nPatches} patches, dim ${result.dim}, ` +
      `extractor ${result.extractorId}`,
  )
}

main().catch(e => {
  console.error(`error: ${e instanceof Error ? e.message : e}`)
  process.exit(e instanceof UsageError ? 2 : 1)
})
