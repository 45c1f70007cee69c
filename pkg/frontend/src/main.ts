/** Form wiring for the query console.
 *
 * Submit stays disabled until an image is selected and while a query is
 * in flight (one request at a time). Service errors surface in the
 * banner and leave the form untouched.
 */

import { fetchStats, postQuery, ServiceError } from './api.js'
import { renderElapsed, renderError, renderGallery, renderStats } from './view.js'

const BASE = ''

function element<T extends HTMLElement>(id: string): T {
  const found = document.getElementById(id)
  if (!found) throw new Error(`missing element #${id}`)
  return found as T
}

export function setupConsole(): void {
  const fileInput = element<HTMLInputElement>('query-image')
  const kInput = element<HTMLInputElement>('query-k')
  const scenarioSelect = element<HTMLSelectElement>('query-scenario')
  const magnificationSelect = element<HTMLSelectElement>('query-magnification')
  const trueLabelSelect = element<HTMLSelectElement>('query-true-label')
  const submit = element<HTMLButtonElement>('query-submit')
  const banner = element<HTMLElement>('error-banner')
  const gallery = element<HTMLElement>('gallery')
  const elapsed = element<HTMLElement>('elapsed')
  const statsPanel = element<HTMLElement>('stats-panel')
  const statsRefresh = element<HTMLButtonElement>('stats-refresh')
  const preview = element<HTMLImageElement>('query-preview')

  let pending = false

  const syncSubmit = () => {
    submit.disabled = pending || !(fileInput.files && fileInput.files.length > 0)
  }

  fileInput.addEventListener('change', () => {
    const file = fileInput.files?.[0]
    if (file) preview.src = URL.createObjectURL(file)
    syncSubmit()
  })

  submit.addEventListener('click', async (event) => {
    event.preventDefault()
    const file = fileInput.files?.[0]
    if (!file || pending) return
    pending = true
    syncSubmit()
    renderError(banner, null)
    try {
      const response = await postQuery(BASE, {
        image: file,
        k: Number(kInput.value) || 5,
        scenario: scenarioSelect.value === 'sen2' ? 'sen2' : 'sen1',
        magnification: magnificationSelect.value,
        trueLabel: trueLabelSelect.value,
      })
      renderGallery(gallery, response, trueLabelSelect.value || null)
      renderElapsed(elapsed, response)
    } catch (error) {
      const message =
        error instanceof ServiceError
          ? error.message
          : 'service unreachable; is `fedsearch serve` running?'
      renderError(banner, message)
    } finally {
      pending = false
      syncSubmit()
    }
  })

  const refreshStats = async () => {
    try {
      renderStats(statsPanel, await fetchStats(BASE))
    } catch {
      renderStats(statsPanel, null)
    }
  }
  statsRefresh.addEventListener('click', () => void refreshStats())

  syncSubmit()
  void refreshStats()
}

if (typeof document !== 'undefined') {
  const boot = () => {
    if (document.getElementById('query-form')) setupConsole()
  }
  if (document.readyState !== 'loading') boot()
  else document.addEventListener('DOMContentLoaded', boot)
}
